//! Consistency models at desk scale.
//!
//! Everything in this crate is pure computation: a small MLP with reverse-mode
//! gradients and forward-mode Jacobian-vector products, the Karras-setting
//! diffusion machinery with analytic Gaussian-mixture scores, consistency
//! distillation and consistency training, their continuous-time objectives,
//! single- and multistep sampling, zero-shot editing and sample-based
//! distribution metrics.
//!
//! The crate is `no_std` and only needs `alloc`. All transcendental functions
//! go through [`math`], which is backed by `libm`, so results are
//! bit-reproducible across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analytic;
pub mod batch;
pub mod consistency;
pub mod ct_infinity;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod evalbench;
pub mod math;
pub mod nn;
pub mod optim;
pub mod sampling;

pub use batch::Batch;
pub use error::{Error, Result};

/// Random number generator used throughout the crate.
///
/// ChaCha8 is portable and its full state (seed, stream, word position) can be
/// captured for checkpointing.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate-wide generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

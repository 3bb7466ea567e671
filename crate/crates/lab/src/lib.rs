//! Runner for `cmlab-core`: JSON run configs, binary checkpoints, CSV and
//! image formats, the training and sampling commands behind the `cmlab`
//! binary, and the theory checks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod runner;
pub mod theory;

pub use error::{LabError, Result};

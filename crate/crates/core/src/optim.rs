//! First-order optimizers. The training loops only see [`Optimizer`], so the
//! rule is swappable and its full state can be checkpointed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input_err, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    /// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
    Sgd { lr: f64, momentum: f64 },
    /// Adam with bias correction.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 1e-2, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(input_err!("invalid optimizer configuration {self:?}"))
        }
    }
}

/// Optimizer rule plus its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        let second = match config {
            OptimizerConfig::Sgd { .. } => Vec::new(),
            OptimizerConfig::Adam { .. } => vec![0.0; num_params],
        };
        Ok(Self { config, steps: 0, first: vec![0.0; num_params], second })
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn from_state(config: OptimizerConfig, steps: u64, first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let second_ok = match config {
            OptimizerConfig::Sgd { .. } => second.is_empty(),
            OptimizerConfig::Adam { .. } => second.len() == first.len(),
        };
        if !second_ok {
            return Err(input_err!("optimizer state does not match its configuration"));
        }
        Ok(Self { config, steps, first, second })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Changes the step size, keeping all accumulated state.
    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.config {
            OptimizerConfig::Sgd { lr: l, .. } | OptimizerConfig::Adam { lr: l, .. } => *l = lr,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.first.len());
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let k = self.steps as i32;
                let c1 = 1.0 - math::powf(beta1, k as f64);
                let c2 = 1.0 - math::powf(beta2, k as f64);
                for (((p, m), v), g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (math::sqrt(vhat) + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        for cfg in [OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 }, OptimizerConfig::adam(0.0)] {
            let mut opt = Optimizer::new(cfg, 3).unwrap();
            let mut p = [1.0, -2.0, 3.0];
            opt.step(&mut p, &[0.5, 0.5, -1.0]);
            assert_eq!(p, [1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 }, 1).unwrap();
        let mut p = [4.0];
        for _ in 0..200 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), 2).unwrap();
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 1.0 }, 1).is_err());
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -0.1, momentum: 0.0 }, 1).is_err());
    }
}

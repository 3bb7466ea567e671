//! Run configuration, stored as JSON.
//!
//! Every field has a default, so a config file only needs the fields it
//! changes. Defaults follow the CIFAR-10 column of the paper's training
//! table where one exists, scaled to desk size where noted.

use std::path::{Path, PathBuf};

use cmlab_core::consistency::{ConsistencyModel, LossConfig, Metric, TrainSchedule, Weighting};
use cmlab_core::diffusion::{GaussianMixture, SolverKind, TimeGrid};
use cmlab_core::evalbench::Dataset;
use cmlab_core::nn::{Activation, Backbone, BackboneConfig, InputScaling};
use cmlab_core::optim::OptimizerConfig;
use cmlab_core::{Batch, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub loss: LossSpec,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerSpec,
    pub train: TrainSpec,
    pub sampling: SamplingSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            grid: GridSpec::default(),
            loss: LossSpec::default(),
            schedule: ScheduleSpec::default(),
            optimizer: OptimizerSpec::default(),
            train: TrainSpec::default(),
            sampling: SamplingSpec::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two equal components at `+-(c, c)` with unit per-coordinate variance.
    #[default]
    TwoGaussians,
    GaussianMixture { weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64> },
    SwissRoll { noise: f64 },
    Checkerboard,
    ProceduralImages { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: ActivationSpec,
    pub sigma_data: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], time_embed_dim: 16, activation: ActivationSpec::Silu, sigma_data: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSpec {
    #[default]
    Silu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub epsilon: f64,
    pub horizon: f64,
    pub rho: f64,
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { epsilon: 0.002, horizon: 80.0, rho: 7.0, n: 18 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpec {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingSpec {
    #[default]
    Constant,
    LinearReparam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverSpec {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub metric: MetricSpec,
    pub weighting: WeightingSpec,
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    /// `K` in the step and EMA schedules.
    pub total_steps: u64,
    pub s0: u32,
    pub s1: u32,
    pub mu0: f64,
    /// Fixed EMA decay used by distillation.
    pub mu: f64,
    pub fixed_n: Option<u32>,
    pub fixed_mu: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { total_steps: 50_000, s0: 2, s1: 150, mu0: 0.9, mu: 0.95, fixed_n: None, fixed_mu: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, lr: 4e-4, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 256 }
    }
}

/// Score source for distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// Closed-form mixture score; needs a Gaussian mixture dataset.
    #[default]
    Analytic,
    /// A score network saved by `train-score`.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    /// Iteration to stop at.
    pub steps: u64,
    pub checkpoint_every: u64,
    pub teacher: TeacherSpec,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { steps: 50_000, checkpoint_every: 1000, teacher: TeacherSpec::Analytic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    /// Intermediate times for `multistep`; searched when absent.
    pub timepoints: Option<Vec<f64>>,
    pub search_iters: usize,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub projections: usize,
    /// Number of points in the editing time grid.
    pub edit_steps: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { timepoints: None, search_iters: 30, eval_count: 1000, eval_seed: 0, projections: 128, edit_steps: 12 }
    }
}

fn config_err(e: impl std::fmt::Display) -> LabError {
    LabError::Config(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds every derived object once so bad values fail early.
    pub fn validate(&self) -> Result<()> {
        self.dataset()?;
        self.backbone_config()?;
        self.grid()?;
        self.loss_config().weighting.validate().map_err(config_err)?;
        self.optimizer_config().validate().map_err(config_err)?;
        self.train_schedule()?;
        if self.optimizer.batch_size == 0 {
            return Err(LabError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.schedule.mu) {
            return Err(LabError::Config(format!("mu must satisfy 0 <= mu < 1, got {}", self.schedule.mu)));
        }
        if !(self.model.sigma_data > 0.0) {
            return Err(LabError::Config("sigma_data must be positive".into()));
        }
        if self.sampling.edit_steps < 2 {
            return Err(LabError::Config("edit_steps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(match &self.dataset {
            DatasetSpec::TwoGaussians => Dataset::GaussianMixture(GaussianMixture::two_component_unit()),
            DatasetSpec::GaussianMixture { weights, means, variances } => {
                let dim = means.first().map_or(0, Vec::len);
                let means = Batch::from_rows(dim, means).map_err(config_err)?;
                Dataset::GaussianMixture(GaussianMixture::new(weights.clone(), means, variances.clone()).map_err(config_err)?)
            }
            DatasetSpec::SwissRoll { noise } => {
                if !(*noise >= 0.0) {
                    return Err(LabError::Config("swiss roll noise must be nonnegative".into()));
                }
                Dataset::SwissRoll { noise: *noise }
            }
            DatasetSpec::Checkerboard => Dataset::Checkerboard,
            DatasetSpec::ProceduralImages { size } => {
                if *size == 0 {
                    return Err(LabError::Config("image size must be positive".into()));
                }
                Dataset::ProceduralImages { size: *size }
            }
        })
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        use cmlab_core::batch::DataSource;
        let activation = match self.model.activation {
            ActivationSpec::Silu => Activation::Silu,
            ActivationSpec::Tanh => Activation::Tanh,
        };
        let cfg = BackboneConfig {
            input_dim: self.dataset()?.dim(),
            hidden: self.model.hidden.clone(),
            time_embed_dim: self.model.time_embed_dim,
            activation,
            input_scaling: InputScaling::Variance { sigma_data: self.model.sigma_data },
        };
        // construction validates the shape
        Backbone::from_params(cfg.clone(), zero_params(&cfg)).map_err(config_err)?;
        Ok(cfg)
    }

    pub fn backbone(&self, rng: &mut Rng) -> Result<Backbone> {
        Backbone::init(self.backbone_config()?, rng).map_err(config_err)
    }

    pub fn consistency_model(&self, rng: &mut Rng) -> Result<ConsistencyModel> {
        let g = &self.grid;
        ConsistencyModel::new(self.backbone(rng)?, self.model.sigma_data, g.epsilon, g.horizon).map_err(config_err)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let g = &self.grid;
        TimeGrid::karras(g.epsilon, g.horizon, g.rho, g.n).map_err(config_err)
    }

    pub fn loss_config(&self) -> LossConfig {
        let metric = match self.loss.metric {
            MetricSpec::L2 => Metric::SquaredL2,
            MetricSpec::L1 => Metric::L1,
        };
        let weighting = match self.loss.weighting {
            WeightingSpec::Constant => Weighting::Constant(1.0),
            WeightingSpec::LinearReparam => {
                Weighting::LinearReparam { epsilon: self.grid.epsilon, horizon: self.grid.horizon }
            }
        };
        let solver = match self.loss.solver {
            SolverSpec::Euler => SolverKind::Euler,
            SolverSpec::Heun => SolverKind::Heun,
        };
        LossConfig { metric, weighting, solver }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        match o.kind {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr: o.lr, momentum: o.momentum },
            OptimizerKind::Adam => OptimizerConfig::Adam { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps },
        }
    }

    pub fn train_schedule(&self) -> Result<TrainSchedule> {
        let s = &self.schedule;
        let sched = TrainSchedule {
            total_steps: s.total_steps,
            s0: s.s0,
            s1: s.s1,
            mu0: s.mu0,
            fixed_n: s.fixed_n,
            fixed_mu: s.fixed_mu,
        };
        sched.validate().map_err(config_err)?;
        Ok(sched)
    }
}

fn zero_params(cfg: &BackboneConfig) -> cmlab_core::nn::ParamVector {
    let layout = cfg.layout();
    let n = layout.iter().map(|s| s.numel()).sum();
    cmlab_core::nn::ParamVector::new(vec![0.0; n], layout).expect("layout matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn table_defaults() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.schedule.s0, cfg.schedule.s1, cfg.schedule.mu0), (2, 150, 0.9));
        assert_eq!(cfg.grid.n, 18);
        assert_eq!(cfg.optimizer.lr, 4e-4);
        assert_eq!(cfg.loss.solver, SolverSpec::Heun);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"schedule": {"s0": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grid": {"n": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"unknown": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"time_embed_dim": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optimizer": {"batch_size": 0}}"#).is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }

    #[test]
    fn dataset_variants_parse() {
        let cfg = RunConfig::from_json(r#"{"dataset": {"kind": "procedural_images", "size": 8}}"#).unwrap();
        assert_eq!(cfg.backbone_config().unwrap().input_dim, 192);
        let cfg = RunConfig::from_json(
            r#"{"dataset": {"kind": "gaussian_mixture", "weights": [1.0], "means": [[0.0, 1.0, 2.0]], "variances": [0.5]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.backbone_config().unwrap().input_dim, 3);
    }
}

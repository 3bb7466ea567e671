//! Training commands: score matching, distillation and consistency
//! training, with checkpointing, resumption and CSV logs.
//!
//! Each run directory holds `checkpoint.bin`, `log.csv` with columns
//! `k,n,mu,loss` and `timing.csv` with columns `k,wall_time_s`. Wall time
//! lives in its own file so that `log.csv` is byte-identical across runs
//! with the same config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmlab_core::analytic::GaussianFlow;
use cmlab_core::consistency::{CdTrainer, ConsistencyFn, ConsistencyModel, CtTrainer, EmaPair, StepRecord};
use cmlab_core::diffusion::{DsmTrainer, LearnedScore, ScoreField};
use cmlab_core::evalbench::Dataset;
use cmlab_core::nn::{Backbone, ParamVector};
use cmlab_core::{seeded_rng, Rng};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::{RunConfig, TeacherSpec};
use crate::error::{LabError, Result};
use crate::io::{fmt_f64, truncate_log, CsvLog};

pub const LOG_HEADER: &str = "k,n,mu,loss";
pub const TIMING_HEADER: &str = "k,wall_time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainKind {
    Score,
    Distill,
    Ct,
}

impl TrainKind {
    fn model_kind(self) -> ModelKind {
        match self {
            TrainKind::Score => ModelKind::Score,
            TrainKind::Distill | TrainKind::Ct => ModelKind::Consistency,
        }
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub iteration: u64,
    pub checkpoint: PathBuf,
}

/// Parameters rebuilt from a checkpoint together with its config.
pub enum LoadedModel {
    Score(Backbone),
    Consistency(EmaPair),
    Oracle(GaussianFlow),
}

pub fn load_config_echo(ck: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_json(&ck.config).map_err(|e| LabError::Checkpoint(format!("embedded config: {e}")))
}

fn params(cfg: &RunConfig, values: &[f64]) -> Result<ParamVector> {
    let layout = cfg.backbone_config()?.layout();
    ParamVector::new(values.to_vec(), layout).map_err(|e| LabError::Checkpoint(e.to_string()))
}

pub fn load_model(ck: &Checkpoint) -> Result<LoadedModel> {
    let cfg = load_config_echo(ck)?;
    let g = &cfg.grid;
    match ck.kind {
        ModelKind::Score => {
            let net = Backbone::from_params(cfg.backbone_config()?, params(&cfg, &ck.online)?)
                .map_err(|e| LabError::Checkpoint(e.to_string()))?;
            Ok(LoadedModel::Score(net))
        }
        ModelKind::Consistency => {
            let bcfg = cfg.backbone_config()?;
            let build = |values: &[f64]| -> Result<ConsistencyModel> {
                let net = Backbone::from_params(bcfg.clone(), params(&cfg, values)?)
                    .map_err(|e| LabError::Checkpoint(e.to_string()))?;
                ConsistencyModel::new(net, cfg.model.sigma_data, g.epsilon, g.horizon)
                    .map_err(|e| LabError::Checkpoint(e.to_string()))
            };
            let online = build(&ck.online)?;
            let target = if ck.target.is_empty() { online.clone() } else { build(&ck.target)? };
            Ok(LoadedModel::Consistency(EmaPair::from_parts(online, target)?))
        }
        ModelKind::GaussianOracle => {
            let (variance, mean) =
                ck.online.split_last().ok_or_else(|| LabError::Checkpoint("empty oracle parameters".into()))?;
            if mean.is_empty() || !(*variance > 0.0) {
                return Err(LabError::Checkpoint("oracle needs a mean and a positive variance".into()));
            }
            Ok(LoadedModel::Oracle(GaussianFlow::new(mean, *variance, g.epsilon, g.horizon)))
        }
    }
}

/// Either a trained consistency model or the closed-form Gaussian one.
pub enum Sampler {
    Model(ConsistencyModel),
    Oracle(GaussianFlow),
}

impl ConsistencyFn for Sampler {
    fn dim(&self) -> usize {
        match self {
            Sampler::Model(m) => m.dim(),
            Sampler::Oracle(g) => g.dim(),
        }
    }
    fn epsilon(&self) -> f64 {
        match self {
            Sampler::Model(m) => m.epsilon(),
            Sampler::Oracle(g) => g.epsilon(),
        }
    }
    fn horizon(&self) -> f64 {
        match self {
            Sampler::Model(m) => m.horizon(),
            Sampler::Oracle(g) => g.horizon(),
        }
    }
    fn apply(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            Sampler::Model(m) => m.apply(x, t, out),
            Sampler::Oracle(g) => g.apply(x, t, out),
        }
    }
    fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64, out: &mut [f64], tangent: &mut [f64]) {
        match self {
            Sampler::Model(m) => m.jvp(x, t, vx, vt, out, tangent),
            Sampler::Oracle(g) => g.jvp(x, t, vx, vt, out, tangent),
        }
    }
}

/// Loads a checkpoint for generation; consistency checkpoints sample with
/// the target (EMA) parameters.
pub fn load_sampler(path: &Path) -> Result<(Sampler, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = load_config_echo(&ck)?;
    let sampler = match load_model(&ck)? {
        LoadedModel::Consistency(pair) => Sampler::Model(pair.target),
        LoadedModel::Oracle(flow) => Sampler::Oracle(flow),
        LoadedModel::Score(_) => {
            return Err(LabError::Checkpoint(format!("{} holds a score network, not a consistency model", path.display())))
        }
    };
    Ok((sampler, cfg))
}

/// The closed-form consistency model of a single-Gaussian dataset.
pub fn oracle_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let ds = cfg.dataset()?;
    let gm = ds.mixture().filter(|gm| gm.components() == 1).ok_or_else(|| {
        LabError::Config("the Gaussian oracle needs a gaussian_mixture dataset with one component".into())
    })?;
    let mut values = gm.means().row(0).to_vec();
    values.push(gm.variances()[0]);
    Ok(Checkpoint::new(ModelKind::GaussianOracle, cfg.to_json(), Vec::new(), values, Vec::new(), &seeded_rng(cfg.seed)))
}

fn teacher(cfg: &RunConfig, ds: &Dataset) -> Result<ScoreField> {
    match &cfg.train.teacher {
        TeacherSpec::Analytic => ds
            .mixture()
            .cloned()
            .map(ScoreField::Analytic)
            .ok_or_else(|| LabError::Config("an analytic teacher needs a Gaussian mixture dataset".into())),
        TeacherSpec::Checkpoint { path } => {
            let ck = Checkpoint::load(path)?;
            match load_model(&ck)? {
                LoadedModel::Score(backbone) => Ok(ScoreField::Learned(LearnedScore { backbone })),
                _ => Err(LabError::Checkpoint(format!("{} is not a score checkpoint", path.display()))),
            }
        }
    }
}

enum Trainer {
    Score(Box<DsmTrainer>),
    Distill(Box<CdTrainer<ScoreField>>),
    Ct(Box<CtTrainer>),
}

impl Trainer {
    fn iteration(&self) -> u64 {
        match self {
            Trainer::Score(t) => t.iteration(),
            Trainer::Distill(t) => t.iteration(),
            Trainer::Ct(t) => t.iteration(),
        }
    }

    fn step(&mut self, data: &Dataset, rng: &mut Rng) -> cmlab_core::Result<(StepRecord, bool)> {
        match self {
            Trainer::Score(t) => {
                let iteration = t.iteration();
                let loss = t.step(data, rng)?;
                Ok((StepRecord { iteration, n: 0, mu: 0.0, loss }, false))
            }
            Trainer::Distill(t) => Ok((t.step(data, rng)?, true)),
            Trainer::Ct(t) => Ok((t.step(data, rng)?, true)),
        }
    }

    fn checkpoint(&self, cfg: &RunConfig, rng: &Rng) -> Checkpoint {
        let (kind, online, target, optimizer, iteration) = match self {
            Trainer::Score(t) => {
                let values = t.backbone().params().values().to_vec();
                (ModelKind::Score, values, Vec::new(), t.optimizer().clone(), t.iteration())
            }
            Trainer::Distill(t) => (
                ModelKind::Consistency,
                t.pair.online.params().values().to_vec(),
                t.pair.target.params().values().to_vec(),
                t.optimizer().clone(),
                t.iteration(),
            ),
            Trainer::Ct(t) => (
                ModelKind::Consistency,
                t.pair.online.params().values().to_vec(),
                t.pair.target.params().values().to_vec(),
                t.optimizer().clone(),
                t.iteration(),
            ),
        };
        let layout = cfg.backbone_config().expect("validated").layout();
        let mut ck = Checkpoint::new(kind, cfg.to_json(), layout, online, target, rng);
        ck.optimizer = Some(optimizer);
        ck.iteration = iteration;
        ck
    }
}

fn build_trainer(kind: TrainKind, cfg: &RunConfig, ds: &Dataset, rng: &mut Rng) -> Result<Trainer> {
    let opt = cfg.optimizer_config();
    let bs = cfg.optimizer.batch_size;
    Ok(match kind {
        TrainKind::Score => Trainer::Score(Box::new(DsmTrainer::new(cfg.backbone(rng)?, cfg.grid()?, bs, opt)?)),
        TrainKind::Distill => {
            let model = cfg.consistency_model(rng)?;
            let t = CdTrainer::new(model, teacher(cfg, ds)?, cfg.grid()?, cfg.loss_config(), cfg.schedule.mu, bs, opt)?;
            Trainer::Distill(Box::new(t))
        }
        TrainKind::Ct => {
            let model = cfg.consistency_model(rng)?;
            let t = CtTrainer::new(model, cfg.train_schedule()?, cfg.loss_config(), cfg.grid.rho, bs, opt)?;
            Trainer::Ct(Box::new(t))
        }
    })
}

fn restore(trainer: &mut Trainer, kind: TrainKind, cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    if ck.kind != kind.model_kind() {
        return Err(LabError::Checkpoint(format!("cannot resume from a {} checkpoint", ck.kind.name())));
    }
    let optimizer = ck.optimizer.clone().ok_or_else(|| LabError::Checkpoint("no optimizer state".into()))?;
    match (trainer, load_model(ck)?) {
        (Trainer::Score(t), LoadedModel::Score(net)) => {
            **t = DsmTrainer::new(net, cfg.grid()?, cfg.optimizer.batch_size, cfg.optimizer_config())?;
            t.restore(ck.iteration, optimizer);
        }
        (Trainer::Distill(t), LoadedModel::Consistency(pair)) => t.restore(pair, optimizer, ck.iteration),
        (Trainer::Ct(t), LoadedModel::Consistency(pair)) => t.restore(pair, optimizer, ck.iteration),
        _ => return Err(LabError::Checkpoint("checkpoint does not match the command".into())),
    }
    Ok(())
}

/// Runs a training command up to `cfg.train.steps` iterations, resuming from
/// `resume` when given.
pub fn train(kind: TrainKind, cfg: &RunConfig, resume: Option<&Path>, paths: &RunPaths) -> Result<TrainOutcome> {
    let started = Instant::now();
    let ds = cfg.dataset()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut trainer = build_trainer(kind, cfg, &ds, &mut rng)?;
    match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.layout != cfg.backbone_config()?.layout() {
                return Err(LabError::Checkpoint("parameter layout differs from the config".into()));
            }
            restore(&mut trainer, kind, cfg, &ck)?;
            rng = ck.rng.restore();
            truncate_log(&paths.log(), ck.iteration)?;
            truncate_log(&paths.timing(), ck.iteration)?;
        }
        None => {
            for p in [paths.log(), paths.timing()] {
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| LabError::io(&p, e))?;
                }
            }
        }
    }
    let mut log = CsvLog::open(&paths.log(), LOG_HEADER)?;
    let mut timing = CsvLog::open(&paths.timing(), TIMING_HEADER)?;
    let ck_path = paths.checkpoint();
    if resume.is_none() {
        trainer.checkpoint(cfg, &rng).save(&ck_path)?;
    }
    let every = cfg.train.checkpoint_every.max(1);
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e| LabError::io(p, e)
    };
    while trainer.iteration() < cfg.train.steps {
        let (rec, consistency) = match trainer.step(&ds, &mut rng) {
            Ok(r) => r,
            Err(cmlab_core::Error::Training { iteration, reason }) => {
                log.flush().map_err(io_err(&paths.log()))?;
                timing.flush().map_err(io_err(&paths.timing()))?;
                return Err(LabError::Diverged { iteration, reason });
            }
            Err(e) => return Err(e.into()),
        };
        let (n, mu) = if consistency { (rec.n.to_string(), fmt_f64(rec.mu)) } else { (String::new(), String::new()) };
        log.row(&format!("{},{n},{mu},{}", rec.iteration, fmt_f64(rec.loss))).map_err(io_err(&paths.log()))?;
        timing
            .row(&format!("{},{:.6}", rec.iteration, started.elapsed().as_secs_f64()))
            .map_err(io_err(&paths.timing()))?;
        let k = trainer.iteration();
        if k % every == 0 || k == cfg.train.steps {
            log.flush().map_err(io_err(&paths.log()))?;
            timing.flush().map_err(io_err(&paths.timing()))?;
            trainer.checkpoint(cfg, &rng).save(&ck_path)?;
        }
    }
    log.flush().map_err(io_err(&paths.log()))?;
    timing.flush().map_err(io_err(&paths.timing()))?;
    trainer.checkpoint(cfg, &rng).save(&ck_path)?;
    Ok(TrainOutcome { iteration: trainer.iteration(), checkpoint: ck_path })
}

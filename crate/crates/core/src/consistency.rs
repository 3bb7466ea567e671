//! Consistency models `f(x, t) = c_skip(t) x + c_out(t) F(x, t)` and the two
//! ways of training them: distillation from a score (CD) and standalone
//! training from data (CT), both with an EMA target network.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::batch::{Batch, DataSource};
use crate::diffusion::{perturb, ScoreFn, SolverKind, TimeGrid};
use crate::error::{input_err, Error, Result};
use crate::math;
use crate::nn::{Backbone, ParamVector, Tape};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::Rng;

/// Default `sigma_data` for image-scaled data in `[-1, 1]`.
pub const SIGMA_DATA: f64 = 0.5;

/// Anything that behaves like a consistency function on `[epsilon, T]`.
pub trait ConsistencyFn {
    fn dim(&self) -> usize;
    fn epsilon(&self) -> f64;
    fn horizon(&self) -> f64;

    fn apply(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Value and `df/dx . v_x + df/dt . v_t`.
    fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64, out: &mut [f64], tangent: &mut [f64]);
}

/// Skip/output coefficients shifted so that the boundary is exact at
/// `epsilon`:
/// `c_skip(t) = s^2 / ((t - eps)^2 + s^2)`,
/// `c_out(t) = s (t - eps) / sqrt(s^2 + t^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub skip: f64,
    pub out: f64,
    pub d_skip: f64,
    pub d_out: f64,
}

pub fn coefficients(sigma_data: f64, epsilon: f64, t: f64) -> Coefficients {
    let s2 = sigma_data * sigma_data;
    let dt = t - epsilon;
    let q = dt * dt + s2;
    let skip = s2 / q;
    let d_skip = -2.0 * s2 * dt / (q * q);
    let v = s2 + t * t;
    let root = math::sqrt(v);
    let out = sigma_data * dt / root;
    let d_out = sigma_data / root - sigma_data * dt * t / (v * root);
    Coefficients { skip, out, d_skip, d_out }
}

/// A neural consistency model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    backbone: Backbone,
    sigma_data: f64,
    epsilon: f64,
    horizon: f64,
}

impl ConsistencyModel {
    pub fn new(backbone: Backbone, sigma_data: f64, epsilon: f64, horizon: f64) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(input_err!("sigma_data must be positive"));
        }
        if !(epsilon > 0.0 && epsilon < horizon) {
            return Err(input_err!("need 0 < epsilon < T"));
        }
        Ok(Self { backbone, sigma_data, epsilon, horizon })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn params(&self) -> &ParamVector {
        self.backbone.params()
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn coefficients(&self, t: f64) -> Coefficients {
        coefficients(self.sigma_data, self.epsilon, t)
    }

    /// `f(x, t)` with a recorded tape for [`ConsistencyModel::backward`].
    pub fn apply_taped(&self, x: &[f64], t: f64, tape: &mut Tape, out: &mut [f64]) -> Coefficients {
        let c = self.coefficients(t);
        self.backbone.forward_taped(x, t, tape, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = c.skip * xi + c.out * *o;
        }
        c
    }

    /// Accumulates `d<g, f>/dtheta`.
    pub fn backward(&self, tape: &mut Tape, c: Coefficients, g: &[f64], grad: &mut [f64]) {
        let gf: Vec<f64> = g.iter().map(|v| c.out * v).collect();
        self.backbone.backward(tape, &gf, grad);
    }

    /// JVP with a recorded tape for [`ConsistencyModel::jvp_backward`].
    #[allow(clippy::too_many_arguments)]
    pub fn jvp_taped(
        &self,
        x: &[f64],
        t: f64,
        vx: &[f64],
        vt: f64,
        tape: &mut Tape,
        out: &mut [f64],
        tangent: &mut [f64],
    ) -> Coefficients {
        let c = self.coefficients(t);
        self.backbone.jvp_taped(x, t, vx, vt, tape, out, tangent);
        for i in 0..x.len() {
            let f = out[i];
            let df = tangent[i];
            out[i] = c.skip * x[i] + c.out * f;
            tangent[i] = c.d_skip * vt * x[i] + c.skip * vx[i] + c.d_out * vt * f + c.out * df;
        }
        c
    }

    /// Accumulates the parameter gradient of `<g_out, f> + <g_tan, jvp>`.
    pub fn jvp_backward(&self, tape: &mut Tape, c: Coefficients, vt: f64, g_out: &[f64], g_tan: &[f64], grad: &mut [f64]) {
        let gf: Vec<f64> = g_out.iter().zip(g_tan).map(|(a, b)| c.out * a + c.d_out * vt * b).collect();
        let gdf: Vec<f64> = g_tan.iter().map(|b| c.out * b).collect();
        self.backbone.jvp_backward(tape, &gf, &gdf, grad);
    }
}

impl ConsistencyFn for ConsistencyModel {
    fn dim(&self) -> usize {
        self.backbone.dim()
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn apply(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let c = self.coefficients(t);
        if c.out == 0.0 {
            // t == epsilon: c_skip is exactly 1
            for (o, xi) in out.iter_mut().zip(x) {
                *o = c.skip * xi;
            }
            return;
        }
        self.backbone.eval(x, t, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = c.skip * xi + c.out * *o;
        }
    }

    fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64, out: &mut [f64], tangent: &mut [f64]) {
        let mut tape = Tape::new(&self.backbone);
        self.jvp_taped(x, t, vx, vt, &mut tape, out, tangent);
    }
}

/// Applies a consistency function to a batch at a single time.
pub fn consistency_apply<F: ConsistencyFn + ?Sized>(model: &F, x: &Batch, t: f64) -> Result<Batch> {
    if !(t >= model.epsilon() && t <= model.horizon()) {
        return Err(input_err!("time {t} is outside [{}, {}]", model.epsilon(), model.horizon()));
    }
    if x.dim() != model.dim() {
        return Err(input_err!("model is {}-d, points are {}-d", model.dim(), x.dim()));
    }
    let mut out = Batch::zeros(x.dim(), x.len());
    for i in 0..x.len() {
        model.apply(x.row(i), t, out.row_mut(i));
    }
    Ok(out)
}

/// Distance `d(a, b)` between model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    SquaredL2,
    L1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::SquaredL2 => "squared_l2",
            Metric::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared_l2" | "l2" => Ok(Metric::SquaredL2),
            "l1" => Ok(Metric::L1),
            other => Err(input_err!("unknown metric {other:?}")),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SquaredL2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::L1 => a.iter().zip(b).map(|(x, y)| math::abs(x - y)).sum(),
        }
    }

    /// `scale * grad_a d(a, b)`, written into `out`.
    pub fn grad_first(self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            let diff = x - y;
            *o = match self {
                Metric::SquaredL2 => 2.0 * diff * scale,
                Metric::L1 => {
                    if diff > 0.0 {
                        scale
                    } else if diff < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                }
            };
        }
    }
}

/// Weighting function `lambda(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Constant(f64),
    /// `lambda(t) = (tau^-1)'(t) = 1 / (T - epsilon)` for a linear `tau`.
    LinearReparam { epsilon: f64, horizon: f64 },
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Constant(1.0)
    }
}

impl Weighting {
    pub fn at(&self, _t: f64) -> f64 {
        match *self {
            Weighting::Constant(c) => c,
            Weighting::LinearReparam { epsilon, horizon } => 1.0 / (horizon - epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Weighting::Constant(c) => c > 0.0 && c.is_finite(),
            Weighting::LinearReparam { epsilon, horizon } => horizon > epsilon,
        };
        if ok {
            Ok(())
        } else {
            Err(input_err!("weighting must be positive on [epsilon, T]"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossConfig {
    pub metric: Metric,
    pub weighting: Weighting,
    pub solver: SolverKind,
}

/// One term `lambda * d(f_online(x_a, t_a), f_target(x_b, t_b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub online_x: Vec<f64>,
    pub online_t: f64,
    pub target_x: Vec<f64>,
    pub target_t: f64,
    pub weight: f64,
}

/// `(x_{t_{n+1}}, x_hat_{t_n})` for distillation.
pub fn cd_pair<S: ScoreFn + ?Sized>(
    score: &S,
    x: &[f64],
    n: usize,
    grid: &TimeGrid,
    solver: SolverKind,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    cd_pair_with_noise(score, x, n, grid, solver, &z)
}

/// [`cd_pair`] with the perturbation noise supplied.
pub fn cd_pair_with_noise<S: ScoreFn + ?Sized>(
    score: &S,
    x: &[f64],
    n: usize,
    grid: &TimeGrid,
    solver: SolverKind,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 1 || n >= grid.len() {
        return Err(input_err!("n must lie in [1, {}], got {n}", grid.len() - 1));
    }
    let (t_n, t_next) = (grid.t(n), grid.t(n + 1));
    let mut x_next = vec![0.0; x.len()];
    perturb(x, t_next, z, &mut x_next);
    let mut x_hat = vec![0.0; x.len()];
    solver.step(score, &x_next, t_next, t_n, &mut x_hat);
    Ok((x_next, x_hat))
}

/// Single-sample distillation loss
/// `lambda(t_n) d(f_online(x_{t_{n+1}}, t_{n+1}), f_target(x_hat_{t_n}, t_n))`.
pub fn cd_loss<A, B>(online: &A, target: &B, pair: (&[f64], &[f64]), t_next: f64, t_n: f64, cfg: &LossConfig) -> f64
where
    A: ConsistencyFn + ?Sized,
    B: ConsistencyFn + ?Sized,
{
    let d = online.dim();
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    online.apply(pair.0, t_next, &mut a);
    target.apply(pair.1, t_n, &mut b);
    cfg.weighting.at(t_n) * cfg.metric.distance(&a, &b)
}

/// Single-sample training loss with one shared `z` in both arms:
/// `lambda(t_n) d(f_online(x + t_{n+1} z, t_{n+1}), f_target(x + t_n z, t_n))`.
pub fn ct_loss<A, B>(online: &A, target: &B, x: &[f64], n: usize, grid: &TimeGrid, z: &[f64], cfg: &LossConfig) -> f64
where
    A: ConsistencyFn + ?Sized,
    B: ConsistencyFn + ?Sized,
{
    let s = ct_sample(x, z, grid.t(n + 1), grid.t(n), cfg);
    let d = online.dim();
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    online.apply(&s.online_x, s.online_t, &mut a);
    target.apply(&s.target_x, s.target_t, &mut b);
    s.weight * cfg.metric.distance(&a, &b)
}

pub fn ct_sample(x: &[f64], z: &[f64], t_next: f64, t_n: f64, cfg: &LossConfig) -> PairSample {
    let mut online_x = vec![0.0; x.len()];
    let mut target_x = vec![0.0; x.len()];
    perturb(x, t_next, z, &mut online_x);
    perturb(x, t_n, z, &mut target_x);
    PairSample { online_x, online_t: t_next, target_x, target_t: t_n, weight: cfg.weighting.at(t_n) }
}

/// Mean of the pair terms and, when `grad` is given, its gradient with
/// respect to the online parameters only. The target arm is evaluated as a
/// constant.
pub fn pair_loss_grad<B: ConsistencyFn + ?Sized>(
    online: &ConsistencyModel,
    target: &B,
    samples: &[PairSample],
    metric: Metric,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let d = online.dim();
    let count = samples.len().max(1) as f64;
    let mut tape = Tape::new(online.backbone());
    let (mut a, mut b, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for s in samples {
        target.apply(&s.target_x, s.target_t, &mut b);
        match grad.as_deref_mut() {
            Some(grad) => {
                let c = online.apply_taped(&s.online_x, s.online_t, &mut tape, &mut a);
                metric.grad_first(&a, &b, s.weight / count, &mut g);
                online.backward(&mut tape, c, &g, grad);
            }
            None => online.apply(&s.online_x, s.online_t, &mut a),
        }
        total += s.weight * metric.distance(&a, &b);
    }
    total / count
}

/// Online parameters `theta` and target parameters `theta^-`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaPair {
    pub online: ConsistencyModel,
    pub target: ConsistencyModel,
}

impl EmaPair {
    /// `theta^- <- theta`.
    pub fn new(model: ConsistencyModel) -> Self {
        Self { target: model.clone(), online: model }
    }

    pub fn from_parts(online: ConsistencyModel, target: ConsistencyModel) -> Result<Self> {
        if !online.params().same_layout(target.params()) {
            return Err(input_err!("online and target layouts differ"));
        }
        Ok(Self { online, target })
    }

    /// `theta^- <- mu theta^- + (1 - mu) theta`.
    pub fn update(&mut self, mu: f64) -> Result<()> {
        ema_update(self.online.params(), self.target.backbone_mut().params_mut(), mu)
    }
}

/// Elementwise `target <- mu target + (1 - mu) online`.
pub fn ema_update(online: &ParamVector, target: &mut ParamVector, mu: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(input_err!("EMA decay must satisfy 0 <= mu < 1, got {mu}"));
    }
    if !online.same_layout(target) {
        return Err(input_err!("online and target layouts differ"));
    }
    for (t, o) in target.values_mut().iter_mut().zip(online.values()) {
        *t = mu * *t + (1.0 - mu) * o;
    }
    Ok(())
}

/// Step and EMA schedules for consistency training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub s0: u32,
    pub s1: u32,
    pub mu0: f64,
    pub fixed_n: Option<u32>,
    pub fixed_mu: Option<f64>,
}

impl TrainSchedule {
    pub fn new(total_steps: u64, s0: u32, s1: u32, mu0: f64) -> Result<Self> {
        let s = Self { total_steps, s0, s1, mu0, fixed_n: None, fixed_mu: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s0 < 2 || self.s0 >= self.s1 {
            return Err(input_err!("need 2 <= s0 < s1, got s0={}, s1={}", self.s0, self.s1));
        }
        if !(self.mu0 > 0.0 && self.mu0 < 1.0) {
            return Err(input_err!("need 0 < mu0 < 1, got {}", self.mu0));
        }
        if self.total_steps == 0 {
            return Err(input_err!("total_steps must be positive"));
        }
        if let Some(n) = self.fixed_n {
            if n < 2 {
                return Err(input_err!("fixed N must be at least 2"));
            }
        }
        if let Some(mu) = self.fixed_mu {
            if !(0.0..1.0).contains(&mu) {
                return Err(input_err!("fixed mu must satisfy 0 <= mu < 1"));
            }
        }
        Ok(())
    }

    /// `N(k)`, or the fixed override.
    pub fn n_at(&self, k: u64) -> u32 {
        self.fixed_n.unwrap_or_else(|| n_schedule(k, self))
    }

    /// `mu(k)`, or the fixed override.
    pub fn mu_at(&self, k: u64) -> f64 {
        self.fixed_mu.unwrap_or_else(|| mu_schedule(k, self))
    }
}

/// `N(k) = ceil(sqrt(k/K ((s1 + 1)^2 - s0^2) + s0^2) - 1) + 1`.
pub fn n_schedule(k: u64, sched: &TrainSchedule) -> u32 {
    let (s0, s1) = (sched.s0 as f64, sched.s1 as f64);
    let frac = k as f64 / sched.total_steps as f64;
    let inner = math::sqrt(frac * ((s1 + 1.0) * (s1 + 1.0) - s0 * s0) + s0 * s0);
    (math::ceil(inner - 1.0) + 1.0) as u32
}

/// `mu(k) = exp(s0 ln(mu0) / N(k))`.
pub fn mu_schedule(k: u64, sched: &TrainSchedule) -> f64 {
    let n = n_schedule(k, sched) as f64;
    math::exp(sched.s0 as f64 * math::ln(sched.mu0) / n)
}

/// What one training iteration did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub n: u32,
    pub mu: f64,
    pub loss: f64,
}

fn check_finite(iteration: u64, loss: f64, params: &ParamVector) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training { iteration, reason: String::from("loss is not finite") });
    }
    if !params.is_finite() {
        return Err(Error::Training { iteration, reason: String::from("parameters are not finite") });
    }
    Ok(())
}

/// Consistency distillation with a fixed grid.
#[derive(Debug, Clone)]
pub struct CdTrainer<S> {
    pub pair: EmaPair,
    pub score: S,
    pub grid: TimeGrid,
    pub loss: LossConfig,
    pub mu: f64,
    pub batch_size: usize,
    optimizer: Optimizer,
    iteration: u64,
    grad: Vec<f64>,
}

impl<S: ScoreFn> CdTrainer<S> {
    pub fn new(
        model: ConsistencyModel,
        score: S,
        grid: TimeGrid,
        loss: LossConfig,
        mu: f64,
        batch_size: usize,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(input_err!("EMA decay must satisfy 0 <= mu < 1, got {mu}"));
        }
        if batch_size == 0 {
            return Err(input_err!("batch size must be positive"));
        }
        loss.weighting.validate()?;
        let optimizer = Optimizer::new(optimizer, model.params().len())?;
        let grad = vec![0.0; model.params().len()];
        Ok(Self { pair: EmaPair::new(model), score, grid, loss, mu, batch_size, optimizer, iteration: 0, grad })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.optimizer
    }

    /// Restores state saved from an earlier run.
    pub fn restore(&mut self, pair: EmaPair, optimizer: Optimizer, iteration: u64) {
        self.pair = pair;
        self.optimizer = optimizer;
        self.iteration = iteration;
    }

    /// Draws one minibatch of distillation pairs.
    pub fn sample_pairs<D: DataSource + ?Sized>(&self, data: &D, rng: &mut Rng) -> Vec<PairSample> {
        let d = data.dim();
        let mut x = vec![0.0; d];
        let mut z = vec![0.0; d];
        let n_max = self.grid.len() - 1;
        (0..self.batch_size)
            .map(|_| {
                data.sample_into(rng, &mut x);
                let n = rng.random_range(1..=n_max);
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let (x_next, x_hat) =
                    cd_pair_with_noise(&self.score, &x, n, &self.grid, self.loss.solver, &z).expect("n in range");
                PairSample {
                    online_x: x_next,
                    online_t: self.grid.t(n + 1),
                    target_x: x_hat,
                    target_t: self.grid.t(n),
                    weight: self.loss.weighting.at(self.grid.t(n)),
                }
            })
            .collect()
    }

    pub fn step<D: DataSource + ?Sized>(&mut self, data: &D, rng: &mut Rng) -> Result<StepRecord> {
        let samples = self.sample_pairs(data, rng);
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        let loss = pair_loss_grad(&self.pair.online, &self.pair.target, &samples, self.loss.metric, Some(&mut self.grad));
        self.optimizer.step(self.pair.online.backbone_mut().params_mut().values_mut(), &self.grad);
        check_finite(self.iteration, loss, self.pair.online.params())?;
        self.pair.update(self.mu)?;
        let record = StepRecord { iteration: self.iteration, n: self.grid.len() as u32, mu: self.mu, loss };
        self.iteration += 1;
        Ok(record)
    }
}

/// Consistency training with `N(k)` and `mu(k)` schedules.
#[derive(Debug, Clone)]
pub struct CtTrainer {
    pub pair: EmaPair,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub rho: f64,
    pub batch_size: usize,
    optimizer: Optimizer,
    iteration: u64,
    grad: Vec<f64>,
}

impl CtTrainer {
    pub fn new(
        model: ConsistencyModel,
        schedule: TrainSchedule,
        loss: LossConfig,
        rho: f64,
        batch_size: usize,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        schedule.validate()?;
        loss.weighting.validate()?;
        if batch_size == 0 {
            return Err(input_err!("batch size must be positive"));
        }
        let optimizer = Optimizer::new(optimizer, model.params().len())?;
        let grad = vec![0.0; model.params().len()];
        Ok(Self { pair: EmaPair::new(model), schedule, loss, rho, batch_size, optimizer, iteration: 0, grad })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.optimizer
    }

    pub fn restore(&mut self, pair: EmaPair, optimizer: Optimizer, iteration: u64) {
        self.pair = pair;
        self.optimizer = optimizer;
        self.iteration = iteration;
    }

    /// Grid used at iteration `k`.
    pub fn grid_at(&self, k: u64) -> Result<TimeGrid> {
        let m = &self.pair.online;
        TimeGrid::karras(m.epsilon(), m.horizon(), self.rho, self.schedule.n_at(k) as usize)
    }

    pub fn step<D: DataSource + ?Sized>(&mut self, data: &D, rng: &mut Rng) -> Result<StepRecord> {
        let k = self.iteration;
        let n_k = self.schedule.n_at(k);
        let mu_k = self.schedule.mu_at(k);
        let grid = self.grid_at(k)?;
        let d = data.dim();
        let mut x = vec![0.0; d];
        let mut z = vec![0.0; d];
        let samples: Vec<PairSample> = (0..self.batch_size)
            .map(|_| {
                data.sample_into(rng, &mut x);
                let n = if n_k == 2 { 1 } else { rng.random_range(1..n_k as usize) };
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                ct_sample(&x, &z, grid.t(n + 1), grid.t(n), &self.loss)
            })
            .collect();
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        let loss = pair_loss_grad(&self.pair.online, &self.pair.target, &samples, self.loss.metric, Some(&mut self.grad));
        self.optimizer.step(self.pair.online.backbone_mut().params_mut().values_mut(), &self.grad);
        check_finite(k, loss, self.pair.online.params())?;
        self.pair.update(mu_k)?;
        self.iteration += 1;
        Ok(StepRecord { iteration: k, n: n_k, mu: mu_k, loss })
    }
}

/// Runs [`CdTrainer`] for `steps` iterations.
#[allow(clippy::too_many_arguments)]
pub fn train_cd<S: ScoreFn, D: DataSource + ?Sized>(
    model: ConsistencyModel,
    score: S,
    data: &D,
    grid: TimeGrid,
    loss: LossConfig,
    mu: f64,
    batch_size: usize,
    optimizer: OptimizerConfig,
    steps: u64,
    rng: &mut Rng,
) -> Result<(EmaPair, Vec<StepRecord>)> {
    let mut trainer = CdTrainer::new(model, score, grid, loss, mu, batch_size, optimizer)?;
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        log.push(trainer.step(data, rng)?);
    }
    Ok((trainer.pair, log))
}

/// Runs [`CtTrainer`] for `steps` iterations.
#[allow(clippy::too_many_arguments)]
pub fn train_ct<D: DataSource + ?Sized>(
    model: ConsistencyModel,
    data: &D,
    schedule: TrainSchedule,
    loss: LossConfig,
    rho: f64,
    batch_size: usize,
    optimizer: OptimizerConfig,
    steps: u64,
    rng: &mut Rng,
) -> Result<(EmaPair, Vec<StepRecord>)> {
    let mut trainer = CtTrainer::new(model, schedule, loss, rho, batch_size, optimizer)?;
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        log.push(trainer.step(data, rng)?);
    }
    Ok((trainer.pair, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianFlow;
    use crate::diffusion::{GaussianMixture, ScoreField, EPSILON, HORIZON, RHO};
    use crate::nn::{Activation, BackboneConfig, InputScaling};
    use crate::seeded_rng;

    fn model(seed: u64) -> ConsistencyModel {
        let cfg = BackboneConfig {
            input_dim: 2,
            hidden: vec![16, 16],
            time_embed_dim: 4,
            activation: Activation::Silu,
            input_scaling: InputScaling::Variance { sigma_data: SIGMA_DATA },
        };
        let net = Backbone::random(cfg, &mut seeded_rng(seed)).unwrap();
        ConsistencyModel::new(net, SIGMA_DATA, EPSILON, HORIZON).unwrap()
    }

    #[test]
    fn boundary_is_bit_exact() {
        let m = model(1);
        let mut rng = seeded_rng(2);
        let x = Batch::standard_normal(2, 100, &mut rng);
        let mut scaled = x.clone();
        scaled.as_mut_slice().iter_mut().for_each(|v| *v *= 1e3);
        for b in [&x, &scaled] {
            let out = consistency_apply(&m, b, EPSILON).unwrap();
            assert_eq!(out.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn coefficients_at_boundary() {
        let c = coefficients(SIGMA_DATA, EPSILON, EPSILON);
        assert_eq!(c.skip, 1.0);
        assert_eq!(c.out, 0.0);
    }

    #[test]
    fn coefficient_derivatives_match_differences() {
        for t in [0.01, 0.7, 5.0, 60.0] {
            let c = coefficients(0.5, EPSILON, t);
            let h = 1e-6;
            let p = coefficients(0.5, EPSILON, t + h);
            let m = coefficients(0.5, EPSILON, t - h);
            assert!((c.d_skip - (p.skip - m.skip) / (2.0 * h)).abs() < 1e-7);
            assert!((c.d_out - (p.out - m.out) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_backbone_gives_skip_scaled_input() {
        let mut m = model(3);
        m.backbone_mut().params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Batch::from_rows(2, &[[1.5, -0.5]]).unwrap();
        let t = 2.0;
        let out = consistency_apply(&m, &x, t).unwrap();
        let skip = 0.25 / ((t - EPSILON) * (t - EPSILON) + 0.25);
        assert_eq!(out.as_slice(), &[skip * 1.5, skip * -0.5]);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let m = model(4);
        let x = Batch::zeros(2, 1);
        assert!(consistency_apply(&m, &x, 0.001).is_err());
        assert!(consistency_apply(&m, &x, 81.0).is_err());
    }

    #[test]
    fn zero_score_pair_is_unmoved() {
        let zero = |_: &[f64], _: f64, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 18).unwrap();
        let (a, b) = cd_pair(&zero, &[0.1, 0.2], 5, &grid, SolverKind::Heun, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_euler_pair_matches_update_rule() {
        let (m, s2) = ([0.5, -0.25], 0.49);
        let gm = GaussianMixture::gaussian(&m, s2).unwrap();
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 18).unwrap();
        let z = [0.3, -1.2];
        let x = [1.0, 2.0];
        let n = 9;
        let (xn, xh) = cd_pair_with_noise(&ScoreField::Analytic(gm), &x, n, &grid, SolverKind::Euler, &z).unwrap();
        let (tn, tn1) = (grid.t(n), grid.t(n + 1));
        for i in 0..2 {
            let xi = x[i] + tn1 * z[i];
            assert_eq!(xn[i], xi);
            let want = xi + (tn - tn1) * tn1 * (xi - m[i]) / (s2 + tn1 * tn1);
            assert!((xh[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_pair_moves_toward_the_mean() {
        let gm = GaussianMixture::gaussian(&[0.0, 0.0], 0.25).unwrap();
        let flow = GaussianFlow::new(&[0.0, 0.0], 0.25, EPSILON, HORIZON);
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 18).unwrap();
        let x = [2.0, -1.0];
        let n = 8;
        let (xn, xh) = cd_pair_with_noise(&ScoreField::Analytic(gm), &x, n, &grid, SolverKind::Heun, &[0.0, 0.0]).unwrap();
        let mut exact = [0.0; 2];
        flow.solve(&xn, grid.t(n + 1), grid.t(n), &mut exact);
        for i in 0..2 {
            // decreasing t contracts toward the mean
            assert!(xh[i].abs() < xn[i].abs());
            assert_eq!(xh[i].signum(), exact[i].signum());
        }
    }

    #[test]
    fn identical_arms_give_zero_loss() {
        let m = model(5);
        let cfg = LossConfig::default();
        let x = [0.3, 0.4];
        assert_eq!(cd_loss(&m, &m, (&x, &x), 3.0, 3.0, &cfg), 0.0);
        let grid = TimeGrid::from_boundaries(vec![EPSILON, 2.0, 2.0 + 1e-300_f64.max(1e-12)]).unwrap();
        assert!(ct_loss(&m, &m, &x, 1, &grid, &[0.0, 0.0], &cfg) >= 0.0);
    }

    #[test]
    fn squared_l2_of_a_known_offset() {
        let id = GaussianFlow::new(&[0.0, 0.0], 1e300, EPSILON, HORIZON); // ratio ~ 1
        let cfg = LossConfig { weighting: Weighting::Constant(2.5), ..Default::default() };
        let v = [0.5, -1.5];
        let a = [1.0, 1.0];
        let b = [1.0 - v[0], 1.0 - v[1]];
        let l = cd_loss(&id, &id, (&a, &b), 3.0, 3.0, &cfg);
        assert!((l - 2.5 * (0.25 + 2.25)).abs() < 1e-12);
    }

    #[test]
    fn time_independent_model_ct_loss() {
        // f(x, t) = x for every t
        struct Identity;
        impl ConsistencyFn for Identity {
            fn dim(&self) -> usize { 2 }
            fn epsilon(&self) -> f64 { EPSILON }
            fn horizon(&self) -> f64 { HORIZON }
            fn apply(&self, x: &[f64], _: f64, out: &mut [f64]) { out.copy_from_slice(x) }
            fn jvp(&self, x: &[f64], _: f64, vx: &[f64], _: f64, out: &mut [f64], tan: &mut [f64]) {
                out.copy_from_slice(x);
                tan.copy_from_slice(vx);
            }
        }
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 10).unwrap();
        let z = [0.7, -0.2];
        let cfg = LossConfig::default();
        let n = 4;
        let l = ct_loss(&Identity, &Identity, &[1.0, 2.0], n, &grid, &z, &cfg);
        let dt = grid.t(n + 1) - grid.t(n);
        assert!((l - dt * dt * (0.49 + 0.04)).abs() < 1e-12 * l.max(1.0));
        // z = 0 and equal times collapse the loss entirely
        let same = TimeGrid::from_boundaries(vec![1.0, 2.0]).unwrap();
        assert_eq!(ct_loss(&Identity, &Identity, &[1.0, 2.0], 1, &same, &[0.0, 0.0], &cfg), 0.0);
    }

    #[test]
    fn shared_noise_matters() {
        let m = model(6);
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 18).unwrap();
        let cfg = LossConfig::default();
        let x = [0.2, -0.3];
        let z1 = [0.5, 1.0];
        let z2 = [-1.0, 0.3];
        let shared = ct_loss(&m, &m, &x, 7, &grid, &z1, &cfg);
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        m.apply(&[x[0] + grid.t(8) * z1[0], x[1] + grid.t(8) * z1[1]], grid.t(8), &mut a);
        m.apply(&[x[0] + grid.t(7) * z2[0], x[1] + grid.t(7) * z2[1]], grid.t(7), &mut b);
        let independent = Metric::SquaredL2.distance(&a, &b);
        assert!((shared - independent).abs() > 1e-6);
    }

    #[test]
    fn ema_update_cases() {
        let m = model(7);
        let mut online = m.params().clone();
        online.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut target = ParamVector::zeros_like(&online);
        ema_update(&online, &mut target, 0.95).unwrap();
        assert!(target.values().iter().all(|&v| (v - 0.05).abs() < 1e-15));
        ema_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target.values(), online.values());
        assert!(ema_update(&online, &mut target, 1.0).is_err());
        assert!(ema_update(&online, &mut target, -0.1).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let m = model(8);
        let mut online = m.params().clone();
        online.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut target = ParamVector::zeros_like(&online);
        let mu: f64 = 0.9;
        for k in 1..=20 {
            ema_update(&online, &mut target, mu).unwrap();
            let gap = 1.0 - target.values()[0];
            assert!((gap - mu.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = TrainSchedule::new(1000, 2, 150, 0.9).unwrap();
        assert_eq!(n_schedule(0, &s), 2);
        assert_eq!(n_schedule(1000, &s), 151);
        assert!((mu_schedule(0, &s) - 0.9).abs() < 1e-15);
        let mut prev = 0;
        for k in 0..=1000 {
            let n = n_schedule(k, &s);
            assert!(n >= prev);
            prev = n;
        }
        assert!(TrainSchedule::new(10, 2, 2, 0.9).is_err());
        assert!(TrainSchedule::new(10, 1, 5, 0.9).is_err());
        assert!(TrainSchedule::new(10, 2, 5, 1.0).is_err());
    }

    #[test]
    fn zero_learning_rate_cd_step() {
        let m = model(9);
        let gm = GaussianMixture::two_component_unit();
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 18).unwrap();
        let mut trainer = CdTrainer::new(
            m.clone(),
            ScoreField::Analytic(gm.clone()),
            grid,
            LossConfig::default(),
            0.95,
            8,
            OptimizerConfig::Sgd { lr: 0.0, momentum: 0.0 },
        )
        .unwrap();
        // make theta^- differ from theta so the EMA is visible
        trainer.pair.target.backbone_mut().params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        trainer.step(&gm, &mut seeded_rng(1)).unwrap();
        assert_eq!(trainer.pair.online.params(), m.params());
        for (t, o) in trainer.pair.target.params().values().iter().zip(m.params().values()) {
            assert_eq!(*t, (1.0 - 0.95) * o);
        }
    }

    #[test]
    fn ct_first_iteration_uses_n_equal_one() {
        let m = model(10);
        let gm = GaussianMixture::two_component_unit();
        let sched = TrainSchedule::new(100, 2, 150, 0.9).unwrap();
        let mut trainer = CtTrainer::new(m, sched, LossConfig::default(), RHO, 4, OptimizerConfig::adam(1e-3)).unwrap();
        let rec = trainer.step(&gm, &mut seeded_rng(2)).unwrap();
        assert_eq!(rec.n, 2);
        assert!((rec.mu - 0.9).abs() < 1e-15);
        assert_eq!(trainer.grid_at(0).unwrap().boundaries(), &[EPSILON, HORIZON]);
    }

    #[test]
    fn fixed_overrides_pin_the_schedule() {
        let mut s = TrainSchedule::new(100, 2, 150, 0.9).unwrap();
        s.fixed_n = Some(150);
        s.fixed_mu = Some(0.99);
        for k in [0, 50, 100] {
            assert_eq!(s.n_at(k), 150);
            assert_eq!(s.mu_at(k), 0.99);
        }
    }
}

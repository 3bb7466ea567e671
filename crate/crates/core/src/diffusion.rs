//! Diffusion machinery in the variance-exploding Karras setting:
//! `p_t = p_data * N(0, t^2 I)` for `t` in `[epsilon, T]`, the probability-flow
//! ODE `dx/dt = -t * score(x, t)`, and its Euler and Heun discretizations.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::batch::{Batch, DataSource};
use crate::error::{input_err, numeric_err, Error, Result};
use crate::math;
use crate::nn::{Backbone, Tape};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::Rng;

/// Smallest time used throughout the toy experiments.
pub const EPSILON: f64 = 0.002;
/// Diffusion horizon.
pub const HORIZON: f64 = 80.0;
/// Karras warp exponent.
pub const RHO: f64 = 7.0;

/// Increasing time discretization `t_1 = epsilon < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    epsilon: f64,
    horizon: f64,
    rho: f64,
    boundaries: Vec<f64>,
}

impl TimeGrid {
    /// Karras spacing:
    /// `t_i = (eps^(1/rho) + (i-1)/(N-1) * (T^(1/rho) - eps^(1/rho)))^rho`.
    ///
    /// The endpoints are stored exactly as given.
    pub fn karras(epsilon: f64, horizon: f64, rho: f64, n: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < horizon && horizon.is_finite()) {
            return Err(input_err!("need 0 < epsilon < T, got epsilon={epsilon}, T={horizon}"));
        }
        if n < 2 {
            return Err(input_err!("a grid needs at least two boundaries, got {n}"));
        }
        if !(rho >= 1.0) {
            return Err(input_err!("rho must be at least 1, got {rho}"));
        }
        let lo = math::powf(epsilon, 1.0 / rho);
        let hi = math::powf(horizon, 1.0 / rho);
        let mut boundaries: Vec<f64> = (0..n)
            .map(|i| math::powf(lo + i as f64 / (n - 1) as f64 * (hi - lo), rho))
            .collect();
        boundaries[0] = epsilon;
        boundaries[n - 1] = horizon;
        Self::from_boundaries(boundaries).map(|g| Self { rho, ..g })
    }

    /// Uniform spacing, i.e. `t_i = tau((i-1)/(N-1))` for a linear `tau`.
    pub fn uniform(epsilon: f64, horizon: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(input_err!("a grid needs at least two boundaries, got {n}"));
        }
        let mut boundaries: Vec<f64> =
            (0..n).map(|i| epsilon + i as f64 / (n - 1) as f64 * (horizon - epsilon)).collect();
        boundaries[n - 1] = horizon;
        let g = Self::from_boundaries(boundaries)?;
        Ok(Self { rho: 1.0, ..g })
    }

    /// Wraps explicit increasing boundaries.
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(input_err!("a grid needs at least two boundaries"));
        }
        if !(boundaries[0] > 0.0) || boundaries.iter().any(|t| !t.is_finite()) {
            return Err(input_err!("grid times must be positive and finite"));
        }
        if boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(input_err!("grid boundaries must be strictly increasing"));
        }
        Ok(Self {
            epsilon: boundaries[0],
            horizon: *boundaries.last().unwrap(),
            rho: f64::NAN,
            boundaries,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of boundaries `N`.
    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// `t_i` with the 1-based index used in the literature.
    pub fn t(&self, i: usize) -> f64 {
        self.boundaries[i - 1]
    }

    /// Largest gap `max |t_{n+1} - t_n|`.
    pub fn max_step(&self) -> f64 {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// `karras_grid(epsilon, T, rho, N)`.
pub fn karras_grid(epsilon: f64, horizon: f64, rho: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::karras(epsilon, horizon, rho, n)
}

/// Isotropic Gaussian mixture `sum_k w_k N(mu_k, sigma_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Batch,
    variances: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Batch, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(input_err!(
                "mixture needs matching weights/means/variances, got {k}/{}/{}",
                means.len(),
                variances.len()
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(input_err!("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(input_err!("mixture weights sum to {total}, not 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(input_err!("mixture variances must be positive"));
        }
        if !means.is_finite() {
            return Err(input_err!("mixture means must be finite"));
        }
        let log_weights = weights.iter().map(|&w| math::ln(w)).collect();
        Ok(Self { weights, means, variances, log_weights })
    }

    /// A single isotropic Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: &[f64], variance: f64) -> Result<Self> {
        let means = Batch::from_rows(mean.len(), &[mean])?;
        Self::new(vec![1.0], means, vec![variance])
    }

    /// Two equally weighted components at `+-(c, c)` with component standard
    /// deviation 0.5 and `c = sqrt(0.75)`, so every coordinate has unit
    /// variance.
    pub fn two_component_unit() -> Self {
        let c = math::sqrt(0.75);
        let means = Batch::from_rows(2, &[[c, c], [-c, -c]]).expect("static shape");
        Self::new(vec![0.5, 0.5], means, vec![0.25, 0.25]).expect("static mixture")
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Batch {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Overall mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(self.means.rows()) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Per-coordinate variance of `p_data`.
    pub fn coordinate_variances(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim()];
        for ((w, mu), s2) in self.weights.iter().zip(self.means.rows()).zip(&self.variances) {
            for i in 0..self.dim() {
                v[i] += w * (s2 + (mu[i] - m[i]) * (mu[i] - m[i]));
            }
        }
        v
    }

    /// Root of the mean per-coordinate variance.
    pub fn data_std(&self) -> f64 {
        let v = self.coordinate_variances();
        math::sqrt(v.iter().sum::<f64>() / v.len() as f64)
    }

    fn component_log_terms(&self, x: &[f64], t: f64, terms: &mut [f64]) {
        let d = self.dim() as f64;
        for (k, term) in terms.iter_mut().enumerate() {
            let var = self.variances[k] + t * t;
            let mu = self.means.row(k);
            let dist2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            *term = self.log_weights[k]
                - 0.5 * d * math::ln(2.0 * core::f64::consts::PI * var)
                - 0.5 * dist2 / var;
        }
    }

    /// `log p_t(x)`.
    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let mut terms = vec![0.0; self.components()];
        self.component_log_terms(x, t, &mut terms);
        math::log_sum_exp(&terms)
    }

    /// `grad_x log p_t(x)`, stabilized with log-sum-exp responsibilities.
    pub fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let k = self.components();
        let mut terms = vec![0.0; k];
        self.component_log_terms(x, t, &mut terms);
        let lse = math::log_sum_exp(&terms);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, term) in terms.iter().enumerate() {
            let r = math::exp(term - lse);
            if r == 0.0 {
                continue;
            }
            let var = self.variances[j] + t * t;
            for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(self.means.row(j))) {
                *o -= r * (a - b) / var;
            }
        }
    }

    /// Draws from `p_data`: a component by weight, then a Gaussian.
    pub fn sample_point(&self, rng: &mut Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let s = math::sqrt(self.variances[k]);
        for (o, m) in out.iter_mut().zip(self.means.row(k)) {
            *o = m + s * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

impl DataSource for GaussianMixture {
    fn dim(&self) -> usize {
        self.means.dim()
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        self.sample_point(rng, out);
    }
}

/// A score function `s(x, t)`.
pub trait ScoreFn {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl<F: Fn(&[f64], f64, &mut [f64])> ScoreFn for F {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

impl ScoreFn for GaussianMixture {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.score_into(x, t, out)
    }
}

/// Learned score `s(x, t) = F_phi(x, t) / t`; the backbone predicts `-z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedScore {
    pub backbone: Backbone,
}

impl ScoreFn for LearnedScore {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.backbone.eval(x, t, out);
        out.iter_mut().for_each(|v| *v /= t);
    }
}

/// Either an analytic mixture score or a learned network.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreField {
    Analytic(GaussianMixture),
    Learned(LearnedScore),
}

impl ScoreFn for ScoreField {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            ScoreField::Analytic(gm) => gm.score_into(x, t, out),
            ScoreField::Learned(net) => net.score(x, t, out),
        }
    }
}

/// `mixture_score(gm, x, t)` for a batch sharing one time.
pub fn mixture_score(gm: &GaussianMixture, x: &Batch, t: f64) -> Result<Batch> {
    if x.dim() != gm.dim() {
        return Err(input_err!("mixture is {}-d, points are {}-d", gm.dim(), x.dim()));
    }
    if !(t >= 0.0) {
        return Err(input_err!("time must be nonnegative, got {t}"));
    }
    let mut out = Batch::zeros(x.dim(), x.len());
    for i in 0..x.len() {
        gm.score_into(x.row(i), t, out.row_mut(i));
    }
    Ok(out)
}

/// Perturbation-kernel sample `x + t z`.
pub fn perturb(x: &[f64], t: f64, z: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(z) {
        *o = a + t * b;
    }
}

/// Result of a self-normalized importance-sampling estimate of the score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    pub estimate: Batch,
    pub exact: Batch,
    /// Euclidean error per query point.
    pub errors: Vec<f64>,
    /// Effective sample size per query point.
    pub ess: Vec<f64>,
}

impl ScoreEstimate {
    pub fn rms_error(&self) -> f64 {
        math::sqrt(self.errors.iter().map(|e| e * e).sum::<f64>() / self.errors.len() as f64)
    }
}

/// Estimates `-E[(x_t - x) / t^2 | x_t]` for each query `x_t` using `m` draws
/// `x ~ p_data` weighted by `N(x_t; x, t^2 I)`, and compares against the
/// closed-form mixture score.
pub fn score_estimator_check(
    gm: &GaussianMixture,
    queries: &Batch,
    t: f64,
    m: usize,
    rng: &mut Rng,
) -> Result<ScoreEstimate> {
    if m == 0 {
        return Err(input_err!("need at least one Monte Carlo draw"));
    }
    if queries.dim() != gm.dim() {
        return Err(input_err!("queries must match the mixture dimension"));
    }
    if !(t > 0.0) {
        return Err(input_err!("time must be positive, got {t}"));
    }
    let d = gm.dim();
    let draws = gm.sample_batch(m, rng);
    let exact = mixture_score(gm, queries, t)?;
    let mut estimate = Batch::zeros(d, queries.len());
    let mut errors = Vec::with_capacity(queries.len());
    let mut ess = Vec::with_capacity(queries.len());
    let mut logw = vec![0.0; m];
    for q in 0..queries.len() {
        let xt = queries.row(q);
        for (lw, x) in logw.iter_mut().zip(draws.rows()) {
            let dist2: f64 = xt.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            *lw = -0.5 * dist2 / (t * t);
        }
        let lse = math::log_sum_exp(&logw);
        if !lse.is_finite() {
            return Err(numeric_err!("importance weights underflowed for query {q}"));
        }
        let est = estimate.row_mut(q);
        let mut sum_w2 = 0.0;
        for (lw, x) in logw.iter().zip(draws.rows()) {
            let w = math::exp(lw - lse);
            sum_w2 += w * w;
            for i in 0..d {
                est[i] -= w * (xt[i] - x[i]) / (t * t);
            }
        }
        let err: f64 = est.iter().zip(exact.row(q)).map(|(a, b)| (a - b) * (a - b)).sum();
        errors.push(math::sqrt(err));
        ess.push(1.0 / sum_w2);
    }
    Ok(ScoreEstimate { estimate, exact, errors, ess })
}

/// One-step ODE solvers for the probability-flow ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    Euler,
    #[default]
    Heun,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "heun" => Ok(SolverKind::Heun),
            other => Err(input_err!("unknown solver {other:?}")),
        }
    }

    /// Order of accuracy of the global error.
    pub fn order(self) -> u32 {
        match self {
            SolverKind::Euler => 1,
            SolverKind::Heun => 2,
        }
    }

    pub fn step<S: ScoreFn + ?Sized>(self, score: &S, x: &[f64], t_from: f64, t_to: f64, out: &mut [f64]) {
        match self {
            SolverKind::Euler => euler_step(score, x, t_from, t_to, out),
            SolverKind::Heun => heun_step(score, x, t_from, t_to, out),
        }
    }
}

/// `x + (t_to - t_from) * (-t_from * s(x, t_from))`.
pub fn euler_step<S: ScoreFn + ?Sized>(score: &S, x: &[f64], t_from: f64, t_to: f64, out: &mut [f64]) {
    score.score(x, t_from, out);
    let h = t_to - t_from;
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi + h * (-t_from * *o);
    }
}

/// Heun's method: an Euler predictor followed by a trapezoidal corrector.
pub fn heun_step<S: ScoreFn + ?Sized>(score: &S, x: &[f64], t_from: f64, t_to: f64, out: &mut [f64]) {
    let d = x.len();
    let mut d1 = vec![0.0; d];
    score.score(x, t_from, &mut d1);
    d1.iter_mut().for_each(|v| *v *= -t_from);
    let h = t_to - t_from;
    let xe: Vec<f64> = x.iter().zip(&d1).map(|(a, b)| a + h * b).collect();
    score.score(&xe, t_to, out);
    for ((o, xi), a) in out.iter_mut().zip(x).zip(&d1) {
        let b = -t_to * *o;
        *o = xi + h * 0.5 * (a + b);
    }
}

/// States visited while integrating from `t_N` down to `t_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Times in the order visited (decreasing).
    pub times: Vec<f64>,
    /// One row per entry of `times`.
    pub states: Batch,
}

impl Trajectory {
    /// The state at `t_1 = epsilon`, taken as the sample.
    pub fn endpoint(&self) -> &[f64] {
        self.states.row(self.states.len() - 1)
    }
}

/// Integrates the probability-flow ODE backwards through every grid boundary.
pub fn solve_pf_ode<S: ScoreFn + ?Sized>(
    score: &S,
    solver: SolverKind,
    grid: &TimeGrid,
    x_start: &[f64],
) -> Result<Trajectory> {
    let d = x_start.len();
    let n = grid.len();
    let mut states = Batch::zeros(d.max(1), n);
    let mut times = Vec::with_capacity(n);
    states.row_mut(0).copy_from_slice(x_start);
    times.push(grid.horizon());
    let b = grid.boundaries();
    let mut next = vec![0.0; d];
    for (step, i) in (0..n - 1).rev().enumerate() {
        solver.step(score, states.row(step), b[i + 1], b[i], &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(numeric_err!("non-finite state after solver step {}", step + 1));
        }
        states.row_mut(step + 1).copy_from_slice(&next);
        times.push(b[i]);
    }
    Ok(Trajectory { times, states })
}

/// Denoising score matching with weighting `t^2`:
/// `E ||t s(x + t z, t) + z||^2 = E ||F(x + t z, t) + z||^2`, with `t` drawn
/// uniformly from the grid boundaries.
pub struct DsmTrainer {
    net: Backbone,
    optimizer: Optimizer,
    grid: TimeGrid,
    batch_size: usize,
    iteration: u64,
    grad: Vec<f64>,
    tape: Tape,
}

impl DsmTrainer {
    pub fn new(net: Backbone, grid: TimeGrid, batch_size: usize, optimizer: OptimizerConfig) -> Result<Self> {
        if batch_size == 0 {
            return Err(input_err!("batch size must be positive"));
        }
        let optimizer = Optimizer::new(optimizer, net.num_params())?;
        let grad = vec![0.0; net.num_params()];
        let tape = Tape::new(&net);
        Ok(Self { net, optimizer, grid, batch_size, iteration: 0, grad, tape })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn backbone(&self) -> &Backbone {
        &self.net
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn restore(&mut self, iteration: u64, optimizer: Optimizer) {
        self.iteration = iteration;
        self.optimizer = optimizer;
    }

    pub fn into_score(self) -> ScoreField {
        ScoreField::Learned(LearnedScore { backbone: self.net })
    }

    /// One optimizer step; returns the minibatch loss before the update.
    pub fn step<D: DataSource + ?Sized>(&mut self, data: &D, rng: &mut Rng) -> Result<f64> {
        let d = self.net.dim();
        let bs = self.batch_size;
        let mut x = Batch::zeros(d, bs);
        let mut z = Batch::zeros(d, bs);
        let mut t = vec![0.0; bs];
        for i in 0..bs {
            data.sample_into(rng, x.row_mut(i));
            t[i] = self.grid.boundaries()[rng.random_range(0..self.grid.len())];
            z.row_mut(i).iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        let loss = dsm_loss(&self.net, &x, &t, &z, Some((&mut self.tape, &mut self.grad)));
        if !loss.is_finite() {
            return Err(Error::Training { iteration: self.iteration, reason: "loss is not finite".into() });
        }
        self.optimizer.step(self.net.params_mut().values_mut(), &self.grad);
        if !self.net.params().is_finite() {
            return Err(Error::Training { iteration: self.iteration, reason: "parameters are not finite".into() });
        }
        self.iteration += 1;
        Ok(loss)
    }
}

/// Mean of `||F(x + t z, t) + z||^2` over a batch. When `grad` is given the
/// parameter gradient is accumulated into it.
pub fn dsm_loss(net: &Backbone, x: &Batch, t: &[f64], z: &Batch, mut grad: Option<(&mut Tape, &mut Vec<f64>)>) -> f64 {
    let d = net.dim();
    let bs = x.len();
    let mut xt = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut loss = 0.0;
    for i in 0..bs {
        let zi = z.row(i);
        perturb(x.row(i), t[i], zi, &mut xt);
        match grad.as_mut() {
            Some((tape, _)) => net.forward_taped(&xt, t[i], tape, &mut out),
            None => net.eval(&xt, t[i], &mut out),
        }
        for j in 0..d {
            let r = out[j] + zi[j];
            loss += r * r;
            g[j] = 2.0 * r / bs as f64;
        }
        if let Some((tape, grad)) = grad.as_mut() {
            net.backward(tape, &g, grad);
        }
    }
    if bs == 0 {
        0.0
    } else {
        loss / bs as f64
    }
}

/// Trains a learned score for `steps` iterations and returns it along with
/// the per-step losses.
pub fn dsm_train<D: DataSource + ?Sized>(
    net: Backbone,
    data: &D,
    grid: &TimeGrid,
    steps: u64,
    batch_size: usize,
    optimizer: OptimizerConfig,
    rng: &mut Rng,
) -> Result<(ScoreField, Vec<f64>)> {
    let mut trainer = DsmTrainer::new(net, grid.clone(), batch_size, optimizer)?;
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        losses.push(trainer.step(data, rng)?);
    }
    Ok((trainer.into_score(), losses))
}

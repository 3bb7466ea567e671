//! Continuous-time limits of the consistency losses.
//!
//! With a linear reparametrization `t = tau(u) = eps + u (T - eps)` and
//! `u ~ U[0, 1]`, the discrete losses scaled by `(N - 1)^p` converge to
//! expectations of a single Jacobian-vector product
//! `v = df/dt + df/dx . w`, where `w = -t s(x_t, t)` for distillation and
//! `w = (x_t - x) / t` for training.
//!
//! The stop-gradient objectives are pseudo-objectives: only their gradient
//! with respect to the online parameters carries meaning.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::batch::{Batch, DataSource};
use crate::consistency::{ConsistencyFn, ConsistencyModel, PairSample, Weighting};
use crate::diffusion::{perturb, ScoreFn, SolverKind, TimeGrid};
use crate::error::{input_err, Result};
use crate::math;
use crate::nn::Tape;
use crate::Rng;

/// Linear time reparametrization together with the weighting `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeReparam {
    pub epsilon: f64,
    pub horizon: f64,
    pub weighting: Weighting,
}

impl TimeReparam {
    /// `lambda = (tau^-1)'`.
    pub fn linear(epsilon: f64, horizon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < horizon) {
            return Err(input_err!("need 0 < epsilon < T"));
        }
        Ok(Self { epsilon, horizon, weighting: Weighting::LinearReparam { epsilon, horizon } })
    }

    pub fn tau(&self, u: f64) -> f64 {
        self.epsilon + u * (self.horizon - self.epsilon)
    }

    /// `(tau^-1)'(t)`, constant for the linear map.
    pub fn inv_derivative(&self) -> f64 {
        1.0 / (self.horizon - self.epsilon)
    }

    /// Uniform grid `t_n = tau((n - 1) / (N - 1))`.
    pub fn grid(&self, n: usize) -> Result<TimeGrid> {
        TimeGrid::uniform(self.epsilon, self.horizon, n)
    }

    /// Grid index `n` in `1..N` whose interval `[t_n, t_{n+1}]` holds `tau(u)`.
    pub fn interval(&self, u: f64, n: usize) -> usize {
        let k = math::ceil(u * (n - 1) as f64) as usize;
        k.clamp(1, n - 1)
    }
}

/// Monte Carlo draws `(x, u, z)` shared by the continuous objectives and
/// their discrete counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousBatch {
    pub x: Batch,
    pub u: Vec<f64>,
    pub z: Batch,
}

impl ContinuousBatch {
    pub fn draw<D: DataSource + ?Sized>(data: &D, count: usize, rng: &mut Rng) -> Self {
        let d = data.dim();
        let mut x = Batch::zeros(d, count);
        let mut z = Batch::zeros(d, count);
        let mut u = Vec::with_capacity(count);
        for i in 0..count {
            data.sample_into(rng, x.row_mut(i));
            u.push(rng.random::<f64>());
            z.row_mut(i).iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        Self { x, u, z }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.x.dim() != dim || self.z.dim() != dim {
            return Err(input_err!("batch is {}-d, model is {dim}-d", self.x.dim()));
        }
        if self.x.len() != self.u.len() || self.z.len() != self.u.len() {
            return Err(input_err!("x, u and z must have the same length"));
        }
        if self.u.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(input_err!("u must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-sample tangent direction.
enum Direction<'a, S: ?Sized> {
    Score(&'a S),
    Data,
}

struct Point {
    xt: Vec<f64>,
    t: f64,
    w: Vec<f64>,
}

fn point<S: ScoreFn + ?Sized>(batch: &ContinuousBatch, i: usize, reparam: &TimeReparam, dir: &Direction<'_, S>) -> Point {
    let t = reparam.tau(batch.u[i]);
    let mut xt = vec![0.0; batch.x.dim()];
    perturb(batch.x.row(i), t, batch.z.row(i), &mut xt);
    let mut w = vec![0.0; xt.len()];
    match dir {
        Direction::Score(score) => {
            score.score(&xt, t, &mut w);
            w.iter_mut().for_each(|v| *v *= -t);
        }
        // (x_t - x) / t, written as z to avoid cancellation
        Direction::Data => w.copy_from_slice(batch.z.row(i)),
    }
    Point { xt, t, w }
}

fn mean(total: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `v = df/dt - t df/dx s(x_t, t)` for every draw.
pub fn cd_drift<F, S>(model: &F, score: &S, batch: &ContinuousBatch, reparam: &TimeReparam) -> Result<Batch>
where
    F: ConsistencyFn + ?Sized,
    S: ScoreFn + ?Sized,
{
    batch.check(model.dim())?;
    let d = model.dim();
    let mut out = Batch::zeros(d, batch.len());
    let mut f = vec![0.0; d];
    for i in 0..batch.len() {
        let p = point(batch, i, reparam, &Direction::Score(score));
        model.jvp(&p.xt, p.t, &p.w, 1.0, &mut f, out.row_mut(i));
    }
    Ok(out)
}

/// `E[lambda / (tau^-1)'^2 ||v||^2]`.
pub fn cd_inf_l2<F, S>(model: &F, score: &S, batch: &ContinuousBatch, reparam: &TimeReparam) -> Result<f64>
where
    F: ConsistencyFn + ?Sized,
    S: ScoreFn + ?Sized,
{
    let v = cd_drift(model, score, batch, reparam)?;
    let inv = reparam.inv_derivative();
    let total: f64 = (0..v.len())
        .map(|i| reparam.weighting.at(reparam.tau(batch.u[i])) / (inv * inv) * math::norm_sq(v.row(i)))
        .sum();
    Ok(mean(total, v.len()))
}

/// `E[lambda / (tau^-1)' ||v||_1]`.
pub fn cd_inf_l1<F, S>(model: &F, score: &S, batch: &ContinuousBatch, reparam: &TimeReparam) -> Result<f64>
where
    F: ConsistencyFn + ?Sized,
    S: ScoreFn + ?Sized,
{
    let v = cd_drift(model, score, batch, reparam)?;
    let inv = reparam.inv_derivative();
    let total: f64 = (0..v.len())
        .map(|i| reparam.weighting.at(reparam.tau(batch.u[i])) / inv * v.row(i).iter().map(|a| math::abs(*a)).sum::<f64>())
        .sum();
    Ok(mean(total, v.len()))
}

/// General quadratic form `1/2 E[lambda / (tau^-1)'^2 v^T G(f) v]`, where
/// `hessian(f, g)` writes the row-major metric Hessian at `f` into `g`.
pub fn cd_inf_quadratic<F, S, H>(model: &F, score: &S, batch: &ContinuousBatch, reparam: &TimeReparam, hessian: H) -> Result<f64>
where
    F: ConsistencyFn + ?Sized,
    S: ScoreFn + ?Sized,
    H: Fn(&[f64], &mut [f64]),
{
    batch.check(model.dim())?;
    let d = model.dim();
    let inv = reparam.inv_derivative();
    let (mut f, mut v, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d * d]);
    let mut total = 0.0;
    for i in 0..batch.len() {
        let p = point(batch, i, reparam, &Direction::Score(score));
        model.jvp(&p.xt, p.t, &p.w, 1.0, &mut f, &mut v);
        hessian(&f, &mut g);
        let mut q = 0.0;
        for r in 0..d {
            q += v[r] * math::dot(&g[r * d..(r + 1) * d], &v);
        }
        total += 0.5 * reparam.weighting.at(p.t) / (inv * inv) * q;
    }
    Ok(mean(total, batch.len()))
}

/// Gradient of [`cd_inf_l2`] (or [`cd_inf_l1`] for `l1 = true`) with respect
/// to the model parameters. Returns the value as well.
pub fn cd_inf_grad<S: ScoreFn + ?Sized>(
    model: &ConsistencyModel,
    score: &S,
    batch: &ContinuousBatch,
    reparam: &TimeReparam,
    l1: bool,
    grad: &mut [f64],
) -> Result<f64> {
    batch.check(model.dim())?;
    let d = model.dim();
    let inv = reparam.inv_derivative();
    let count = batch.len().max(1) as f64;
    let mut tape = Tape::new(model.backbone());
    let (mut f, mut v, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let zeros = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let p = point(batch, i, reparam, &Direction::Score(score));
        let c = model.jvp_taped(&p.xt, p.t, &p.w, 1.0, &mut tape, &mut f, &mut v);
        let lam = reparam.weighting.at(p.t);
        if l1 {
            let w = lam / inv;
            total += w * v.iter().map(|a| math::abs(*a)).sum::<f64>();
            for (gi, vi) in g.iter_mut().zip(&v) {
                *gi = if *vi > 0.0 { w / count } else if *vi < 0.0 { -w / count } else { 0.0 };
            }
        } else {
            let w = lam / (inv * inv);
            total += w * math::norm_sq(&v);
            for (gi, vi) in g.iter_mut().zip(&v) {
                *gi = 2.0 * w * vi / count;
            }
        }
        model.jvp_backward(&mut tape, c, 1.0, &zeros, &g, grad);
    }
    Ok(mean(total, batch.len()))
}

fn stopgrad_pseudo<S: ScoreFn + ?Sized, B: ConsistencyFn + ?Sized>(
    online: &ConsistencyModel,
    target: &B,
    batch: &ContinuousBatch,
    reparam: &TimeReparam,
    dir: Direction<'_, S>,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    batch.check(online.dim())?;
    if target.dim() != online.dim() {
        return Err(input_err!("online and target dimensions differ"));
    }
    let d = online.dim();
    let inv = reparam.inv_derivative();
    let count = batch.len().max(1) as f64;
    let mut tape = Tape::new(online.backbone());
    let (mut f, mut ft, mut v, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for i in 0..batch.len() {
        let p = point(batch, i, reparam, &dir);
        target.jvp(&p.xt, p.t, &p.w, 1.0, &mut ft, &mut v);
        let w = 2.0 * reparam.weighting.at(p.t) / inv;
        match grad.as_deref_mut() {
            Some(grad) => {
                let c = online.apply_taped(&p.xt, p.t, &mut tape, &mut f);
                for (gi, vi) in g.iter_mut().zip(&v) {
                    *gi = w * vi / count;
                }
                online.backward(&mut tape, c, &g, grad);
            }
            None => online.apply(&p.xt, p.t, &mut f),
        }
        total += w * math::dot(&f, &v);
    }
    Ok(mean(total, batch.len()))
}

/// Distillation pseudo-objective
/// `2 E[lambda / (tau^-1)' f_online^T (df_target/dt - t df_target/dx s)]`.
/// When `grad` is given, its gradient with respect to the online parameters
/// is accumulated into it.
pub fn cd_inf_stopgrad_l2<S, B>(
    online: &ConsistencyModel,
    target: &B,
    score: &S,
    batch: &ContinuousBatch,
    reparam: &TimeReparam,
    grad: Option<&mut [f64]>,
) -> Result<f64>
where
    S: ScoreFn + ?Sized,
    B: ConsistencyFn + ?Sized,
{
    stopgrad_pseudo(online, target, batch, reparam, Direction::Score(score), grad)
}

/// Training pseudo-objective
/// `2 E[lambda / (tau^-1)' f_online^T (df_target/dt + df_target/dx (x_t - x) / t)]`.
pub fn ct_inf_stopgrad<B: ConsistencyFn + ?Sized>(
    online: &ConsistencyModel,
    target: &B,
    batch: &ContinuousBatch,
    reparam: &TimeReparam,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    stopgrad_pseudo::<fn(&[f64], f64, &mut [f64]), B>(online, target, batch, reparam, Direction::Data, grad)
}

/// Discrete distillation pairs on the uniform `N`-point grid that reuse the
/// draws of `batch`: each `u` selects the interval containing `tau(u)`.
pub fn discrete_cd_pairs<S: ScoreFn + ?Sized>(
    score: &S,
    batch: &ContinuousBatch,
    reparam: &TimeReparam,
    n: usize,
    solver: SolverKind,
) -> Result<Vec<PairSample>> {
    let grid = reparam.grid(n)?;
    let d = batch.x.dim();
    Ok((0..batch.len())
        .map(|i| {
            let k = reparam.interval(batch.u[i], n);
            let (t_n, t_next) = (grid.t(k), grid.t(k + 1));
            let mut online_x = vec![0.0; d];
            perturb(batch.x.row(i), t_next, batch.z.row(i), &mut online_x);
            let mut target_x = vec![0.0; d];
            solver.step(score, &online_x, t_next, t_n, &mut target_x);
            PairSample { online_x, online_t: t_next, target_x, target_t: t_n, weight: reparam.weighting.at(t_n) }
        })
        .collect())
}

/// Discrete training pairs on the uniform grid with shared `z`.
pub fn discrete_ct_pairs(batch: &ContinuousBatch, reparam: &TimeReparam, n: usize) -> Result<Vec<PairSample>> {
    let grid = reparam.grid(n)?;
    let d = batch.x.dim();
    Ok((0..batch.len())
        .map(|i| {
            let k = reparam.interval(batch.u[i], n);
            let (t_n, t_next) = (grid.t(k), grid.t(k + 1));
            let mut online_x = vec![0.0; d];
            let mut target_x = vec![0.0; d];
            perturb(batch.x.row(i), t_next, batch.z.row(i), &mut online_x);
            perturb(batch.x.row(i), t_n, batch.z.row(i), &mut target_x);
            PairSample { online_x, online_t: t_next, target_x, target_t: t_n, weight: reparam.weighting.at(t_n) }
        })
        .collect())
}

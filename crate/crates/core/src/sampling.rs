//! One-step and multistep generation, and greedy selection of the
//! intermediate time points.

use alloc::vec;
use alloc::vec::Vec;

use crate::batch::Batch;
use crate::consistency::ConsistencyFn;
use crate::error::{input_err, numeric_err, Result};
use crate::math;
use crate::{seeded_rng, Rng};

/// Intermediate times `tau_1 > ... > tau_{N-1}` strictly inside `(eps, T)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePlan {
    timepoints: Vec<f64>,
}

impl SamplePlan {
    pub fn new(timepoints: Vec<f64>, epsilon: f64, horizon: f64) -> Result<Self> {
        for (i, &tau) in timepoints.iter().enumerate() {
            if !(tau > epsilon && tau < horizon) {
                return Err(input_err!("time point {tau} is not inside ({epsilon}, {horizon})"));
            }
            if i > 0 && tau >= timepoints[i - 1] {
                return Err(input_err!("time points must be strictly decreasing"));
            }
        }
        Ok(Self { timepoints })
    }

    /// The single-step plan.
    pub fn one_step() -> Self {
        Self::default()
    }

    pub fn timepoints(&self) -> &[f64] {
        &self.timepoints
    }

    /// Number of network evaluations.
    pub fn steps(&self) -> usize {
        self.timepoints.len() + 1
    }
}

/// `f(x_T, T)` with `x_T ~ N(0, T^2 I)`.
pub fn sample_one_step<F: ConsistencyFn + ?Sized>(model: &F, rng: &mut Rng, count: usize) -> Batch {
    sample_multistep(model, &SamplePlan::one_step(), rng, count).expect("the empty plan is always valid")
}

/// Multistep consistency sampling: one full step from `T`, then for each
/// `tau_n` add noise of variance `tau_n^2 - eps^2` and map back.
pub fn sample_multistep<F: ConsistencyFn + ?Sized>(
    model: &F,
    plan: &SamplePlan,
    rng: &mut Rng,
    count: usize,
) -> Result<Batch> {
    let (eps, horizon) = (model.epsilon(), model.horizon());
    if let Some(&tau) = plan.timepoints.iter().find(|&&tau| !(tau > eps && tau < horizon)) {
        return Err(input_err!("time point {tau} is not inside ({eps}, {horizon})"));
    }
    let d = model.dim();
    let mut x = Batch::standard_normal(d, count, rng);
    x.as_mut_slice().iter_mut().for_each(|v| *v *= horizon);
    let mut out = Batch::zeros(d, count);
    for i in 0..count {
        model.apply(x.row(i), horizon, out.row_mut(i));
    }
    for &tau in &plan.timepoints {
        let z = Batch::standard_normal(d, count, rng);
        let scale = math::sqrt(tau * tau - eps * eps);
        for (xi, (oi, zi)) in x.as_mut_slice().iter_mut().zip(out.as_slice().iter().zip(z.as_slice())) {
            *xi = oi + scale * zi;
        }
        for i in 0..count {
            model.apply(x.row(i), tau, out.row_mut(i));
        }
    }
    Ok(out)
}

/// Ternary search for the minimizer of a unimodal `f` on the open interval
/// `(lo, hi)`. Only interior points are evaluated.
pub fn ternary_search<G>(mut f: G, lo: f64, hi: f64, iters: usize) -> Result<f64>
where
    G: FnMut(f64) -> Result<f64>,
{
    if !(lo < hi) {
        return Err(input_err!("empty search interval ({lo}, {hi})"));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..iters {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        let (f1, f2) = (f(m1)?, f(m2)?);
        if !f1.is_finite() || !f2.is_finite() {
            return Err(numeric_err!("search objective is not finite near {m1}"));
        }
        if f1 <= f2 {
            b = m2;
        } else {
            a = m1;
        }
    }
    Ok(0.5 * (a + b))
}

/// Settings for [`greedy_timepoint_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub max_steps: usize,
    pub search_iters: usize,
    pub eval_count: usize,
    pub eval_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { max_steps: 2, search_iters: 30, eval_count: 1000, eval_seed: 0 }
    }
}

/// Picks `tau_1, tau_2, ...` one at a time, each by ternary search on
/// `(eps, tau_{n-1})` with earlier points held fixed. Every evaluation uses
/// the same noise so the objective is deterministic.
pub fn greedy_timepoint_search<F, M>(model: &F, mut metric: M, cfg: &SearchConfig) -> Result<SamplePlan>
where
    F: ConsistencyFn + ?Sized,
    M: FnMut(&Batch) -> Result<f64>,
{
    if cfg.max_steps == 0 {
        return Err(input_err!("max_steps must be at least 1"));
    }
    let (eps, horizon) = (model.epsilon(), model.horizon());
    let mut points: Vec<f64> = vec![];
    for _ in 1..cfg.max_steps {
        let upper = points.last().copied().unwrap_or(horizon);
        let base = points.clone();
        let best = ternary_search(
            |tau| {
                let mut trial = base.clone();
                trial.push(tau);
                let plan = SamplePlan { timepoints: trial };
                let samples = sample_multistep(model, &plan, &mut seeded_rng(cfg.eval_seed), cfg.eval_count)?;
                metric(&samples)
            },
            eps,
            upper,
            cfg.search_iters,
        )?;
        points.push(best);
    }
    SamplePlan::new(points, eps, horizon)
}

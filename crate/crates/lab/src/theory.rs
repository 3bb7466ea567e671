//! Self-contained numerical checks against analytic oracles.

use std::collections::BTreeMap;

use cmlab_core::analytic::{GaussianFlow, IntegratedConsistency};
use cmlab_core::batch::DataSource;
use cmlab_core::consistency::{
    ema_update, pair_loss_grad, CdTrainer, ConsistencyFn, ConsistencyModel, LossConfig, Metric,
};
use cmlab_core::ct_infinity::{
    cd_inf_l2, cd_inf_stopgrad_l2, ct_inf_stopgrad, discrete_cd_pairs, discrete_ct_pairs, ContinuousBatch,
    TimeReparam,
};
use cmlab_core::diffusion::{
    score_estimator_check, solve_pf_ode, GaussianMixture, SolverKind, TimeGrid, EPSILON, HORIZON, RHO,
};
use cmlab_core::math::ols_slope;
use cmlab_core::nn::{Activation, Backbone, BackboneConfig, InputScaling};
use cmlab_core::optim::OptimizerConfig;
use cmlab_core::{seeded_rng, Batch};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};

pub const REPORT_FORMAT: &str = "cmlab-verify-theory/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Check {
    Boundary,
    SolverOrder,
    Lemma1,
    CdFidelity,
    Theorem2,
    Limits,
}

impl Check {
    pub const ALL: [Check; 6] =
        [Check::Boundary, Check::SolverOrder, Check::Lemma1, Check::CdFidelity, Check::Theorem2, Check::Limits];

    pub fn name(self) -> &'static str {
        match self {
            Check::Boundary => "boundary",
            Check::SolverOrder => "solver_order",
            Check::Lemma1 => "lemma1",
            Check::CdFidelity => "cd_fidelity",
            Check::Theorem2 => "theorem2",
            Check::Limits => "limits",
        }
    }

    pub fn criterion(self) -> u32 {
        Check::ALL.iter().position(|&c| c == self).expect("listed") as u32 + 1
    }

    pub fn parse(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s || c.criterion().to_string() == s)
            .ok_or_else(|| LabError::Config(format!("unknown check {s:?}")))
    }

    /// Parses a comma-separated list, keeping the canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = s.split(',').map(|p| Check::parse(p.trim())).collect::<Result<Vec<_>>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub criterion: u32,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub detail: String,
}

impl CheckResult {
    fn new(check: Check) -> Self {
        Self {
            name: check.name().into(),
            criterion: check.criterion(),
            passed: false,
            metrics: BTreeMap::new(),
            series: BTreeMap::new(),
            detail: String::new(),
        }
    }

    fn metric(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    fn series(&mut self, key: &str, v: Vec<f64>) {
        self.series.insert(key.into(), v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub format: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions {
    pub seed: u64,
    /// Training iterations for the distillation fidelity check.
    pub cd_steps: u64,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self { seed: 0, cd_steps: 20_000 }
    }
}

pub fn run(check: Check, opts: &TheoryOptions) -> Result<CheckResult> {
    match check {
        Check::Boundary => boundary(opts),
        Check::SolverOrder => solver_order(),
        Check::Lemma1 => lemma1(opts),
        Check::CdFidelity => cd_fidelity(opts),
        Check::Theorem2 => theorem2(opts),
        Check::Limits => limits(opts),
    }
}

pub fn run_all(checks: &[Check], opts: &TheoryOptions) -> Result<Report> {
    let checks = checks.iter().map(|&c| run(c, opts)).collect::<Result<Vec<_>>>()?;
    Ok(Report { format: REPORT_FORMAT.into(), seed: opts.seed, passed: checks.iter().all(|c| c.passed), checks })
}

/// `f(x, eps) == x` bit for bit over random networks and inputs.
pub fn boundary(opts: &TheoryOptions) -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::Boundary);
    let mut rng = seeded_rng(opts.seed ^ 0xb0);
    let (nets, per_net) = (100, 100);
    let mut mismatches = 0u64;
    for _ in 0..nets {
        let dim = rng.random_range(1..=6);
        let cfg = BackboneConfig {
            input_dim: dim,
            hidden: vec![rng.random_range(4..=32); rng.random_range(1..=3)],
            time_embed_dim: 2 * rng.random_range(1..=8),
            activation: if rng.random() { Activation::Silu } else { Activation::Tanh },
            input_scaling: InputScaling::Variance { sigma_data: 0.5 },
        };
        let net = Backbone::random(cfg, &mut rng)?;
        let model = ConsistencyModel::new(net, rng.random_range(0.1..2.0), EPSILON, HORIZON)?;
        let mut out = vec![0.0; dim];
        for _ in 0..per_net {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let x: Vec<f64> = Batch::standard_normal(dim, 1, &mut rng).into_vec().iter().map(|v| v * scale).collect();
            model.apply(&x, EPSILON, &mut out);
            mismatches += x.iter().zip(&out).filter(|(a, b)| a.to_bits() != b.to_bits()).count() as u64;
        }
    }
    res.metric("inputs", (nets * per_net) as f64);
    res.metric("mismatched_coordinates", mismatches as f64);
    res.passed = mismatches == 0;
    res.detail = format!("{} inputs over {nets} networks, {mismatches} mismatched coordinates", nets * per_net);
    Ok(res)
}

pub const ORDER_NS: [usize; 5] = [10, 20, 40, 80, 160];

/// Global error of Euler and Heun against the closed-form Gaussian flow.
pub fn solver_order() -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::SolverOrder);
    let flow = GaussianFlow::new(&[0.5, -0.3], 0.25, EPSILON, HORIZON);
    let starts = [[60.0, -40.0], [-100.0, 5.0], [10.0, 120.0]];
    let mut errs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for solver in [SolverKind::Euler, SolverKind::Heun] {
        for &n in &ORDER_NS {
            let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, n)?;
            let mut worst: f64 = 0.0;
            for x in &starts {
                let traj = solve_pf_ode(&flow, solver, &grid, x)?;
                let mut exact = [0.0; 2];
                flow.solve(x, HORIZON, EPSILON, &mut exact);
                let e = traj.endpoint().iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                worst = worst.max(e);
            }
            errs.entry(solver.name()).or_default().push(worst);
        }
    }
    let log_n: Vec<f64> = ORDER_NS.iter().map(|&n| (n as f64).ln()).collect();
    let slope = |e: &[f64]| -ols_slope(&log_n, &e.iter().map(|v| v.ln()).collect::<Vec<_>>());
    let (euler, heun) = (&errs["euler"], &errs["heun"]);
    let (p_euler, p_heun) = (slope(euler), slope(heun));
    let heun_better = heun.iter().zip(euler).all(|(h, e)| h <= e);
    res.metric("euler_order", p_euler);
    res.metric("heun_order", p_heun);
    res.series("n", ORDER_NS.iter().map(|&n| n as f64).collect());
    res.series("euler_error", euler.clone());
    res.series("heun_error", heun.clone());
    res.passed = (p_euler - 1.0).abs() <= 0.2 && (p_heun - 2.0).abs() <= 0.25 && heun_better;
    res.detail = format!("orders: euler {p_euler:.3} (1 +- 0.2), heun {p_heun:.3} (2 +- 0.25); heun <= euler at every N: {heun_better}");
    Ok(res)
}

pub const LEMMA_MS: [usize; 4] = [100, 1_000, 10_000, 100_000];

/// Error of the self-normalized estimator of the score against the mixture
/// score, as a function of the number of draws.
pub fn lemma1(opts: &TheoryOptions) -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::Lemma1);
    let gm = GaussianMixture::two_component_unit();
    let t = 1.0;
    let mut qrng = seeded_rng(opts.seed ^ 0x1e);
    let queries = {
        let x = gm.sample_batch(16, &mut qrng);
        let z = Batch::standard_normal(2, 16, &mut qrng);
        let rows: Vec<f64> = x.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a + t * b).collect();
        Batch::new(2, rows)?
    };
    let repeats = 8;
    let mut errors = Vec::new();
    for &m in &LEMMA_MS {
        let total: f64 = (0..repeats)
            .into_par_iter()
            .map(|r| {
                let mut rng = seeded_rng(opts.seed.wrapping_add(1000 * m as u64 + r));
                score_estimator_check(&gm, &queries, t, m, &mut rng).map(|e| e.rms_error())
            })
            .collect::<cmlab_core::Result<Vec<f64>>>()?
            .iter()
            .sum();
        errors.push(total / repeats as f64);
    }
    let log_m: Vec<f64> = LEMMA_MS.iter().map(|&m| (m as f64).ln()).collect();
    let slope = ols_slope(&log_m, &errors.iter().map(|e| e.ln()).collect::<Vec<_>>());
    res.metric("slope", slope);
    res.series("m", LEMMA_MS.iter().map(|&m| m as f64).collect());
    res.series("rms_error", errors);
    res.passed = (slope + 0.5).abs() <= 0.15;
    res.detail = format!("error slope vs M: {slope:.3} (-0.5 +- 0.15)");
    Ok(res)
}

/// Settings for one distillation run of the fidelity check.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelitySetup {
    pub n: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Peak Adam step size, annealed to zero on a half cosine.
    pub lr: f64,
    pub mu: f64,
    /// Decay of the evaluation average of the online weights.
    pub eval_ema: f64,
    pub seed: u64,
}

impl FidelitySetup {
    pub fn desk(steps: u64, seed: u64) -> Self {
        Self { n: 36, steps, batch_size: 128, hidden: vec![128, 128, 128], lr: 1e-3, mu: 0.95, eval_ema: 0.999, seed }
    }
}

/// Test lattice: every grid time above epsilon, and `x = s(t) g` with `g` on
/// `{-2, -1, 0, 1, 2}^2` and `s(t)` the marginal standard deviation.
pub fn fidelity_lattice(gm: &GaussianMixture, grid: &TimeGrid) -> Vec<(Vec<f64>, f64)> {
    let var = gm.data_std().powi(2);
    let mut pts = Vec::new();
    for &t in &grid.boundaries()[1..] {
        let s = (var + t * t).sqrt();
        for i in -2..=2 {
            for j in -2..=2 {
                pts.push((vec![s * i as f64, s * j as f64], t));
            }
        }
    }
    pts
}

/// Distills the analytic mixture score with `solver` and returns the
/// largest distance to the RK4 consistency function over the lattice.
pub fn distill_sup_error(setup: &FidelitySetup, solver: SolverKind) -> Result<f64> {
    let gm = GaussianMixture::two_component_unit();
    let mut rng = seeded_rng(setup.seed);
    let cfg = BackboneConfig { hidden: setup.hidden.clone(), ..BackboneConfig::toy(2) };
    let model = ConsistencyModel::new(Backbone::init(cfg, &mut rng)?, gm.data_std(), EPSILON, HORIZON)?;
    let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, setup.n)?;
    let loss = LossConfig { solver, ..LossConfig::default() };
    let mut trainer =
        CdTrainer::new(model, gm.clone(), grid.clone(), loss, setup.mu, setup.batch_size, OptimizerConfig::adam(setup.lr))?;
    let mut eval = trainer.pair.online.clone();
    for k in 0..setup.steps {
        let phase = core::f64::consts::PI * k as f64 / setup.steps as f64;
        trainer.optimizer_mut().set_lr(0.5 * setup.lr * (1.0 + phase.cos()));
        trainer.step(&gm, &mut rng)?;
        ema_update(trainer.pair.online.params(), eval.backbone_mut().params_mut(), setup.eval_ema)?;
    }
    let reference = IntegratedConsistency { score: gm.clone(), dim: 2, epsilon: EPSILON, horizon: HORIZON, steps: 2000 };
    let errors: Vec<f64> = fidelity_lattice(&gm, &grid)
        .par_iter()
        .map(|(x, t)| {
            let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
            eval.apply(x, *t, &mut a);
            reference.apply(x, *t, &mut b);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .collect();
    Ok(errors.into_iter().fold(0.0, f64::max))
}

pub fn cd_fidelity(opts: &TheoryOptions) -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::CdFidelity);
    let setup = FidelitySetup::desk(opts.cd_steps, opts.seed ^ 0xcd);
    let std = GaussianMixture::two_component_unit().data_std();
    let heun = distill_sup_error(&setup, SolverKind::Heun)?;
    let euler = distill_sup_error(&setup, SolverKind::Euler)?;
    let bound = 0.05 * std;
    res.metric("heun_sup_error", heun);
    res.metric("euler_sup_error", euler);
    res.metric("bound", bound);
    res.metric("steps", setup.steps as f64);
    res.passed = heun <= bound && euler >= heun;
    res.detail = format!("sup error heun {heun:.4} (<= {bound:.4}), euler {euler:.4} (>= heun)");
    Ok(res)
}

pub const THEOREM2_NS: [usize; 4] = [10, 40, 160, 640];

fn toy_model(seed: u64) -> Result<ConsistencyModel> {
    let gm = GaussianMixture::two_component_unit();
    let net = Backbone::init(BackboneConfig::toy(2), &mut seeded_rng(seed))?;
    Ok(ConsistencyModel::new(net, gm.data_std(), EPSILON, HORIZON)?)
}

/// Discrete CD (Euler, exact score) against CT on shared draws at `theta =
/// theta^-`.
pub fn theorem2(opts: &TheoryOptions) -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::Theorem2);
    let gm = GaussianMixture::two_component_unit();
    let model = toy_model(opts.seed ^ 0x72)?;
    let reparam = TimeReparam::linear(EPSILON, HORIZON)?;
    let batch = ContinuousBatch::draw(&gm, 4096, &mut seeded_rng(opts.seed ^ 0x73));
    let (mut cd, mut ct) = (Vec::new(), Vec::new());
    for &n in &THEOREM2_NS {
        let pairs = discrete_cd_pairs(&gm, &batch, &reparam, n, SolverKind::Euler)?;
        cd.push(pair_loss_grad(&model, &model, &pairs, Metric::SquaredL2, None));
        let pairs = discrete_ct_pairs(&batch, &reparam, n)?;
        ct.push(pair_loss_grad(&model, &model, &pairs, Metric::SquaredL2, None));
    }
    let gap: Vec<f64> = cd.iter().zip(&ct).map(|(a, b)| (a - b).abs()).collect();
    let monotone = gap.windows(2).all(|w| w[1] < w[0]);
    let relative = gap[gap.len() - 1] / ct[ct.len() - 1];
    res.metric("final_relative_gap", relative);
    res.series("n", THEOREM2_NS.iter().map(|&n| n as f64).collect());
    res.series("cd_loss", cd);
    res.series("ct_loss", ct);
    res.series("gap", gap);
    res.passed = monotone && relative < 0.01;
    res.detail = format!("gap decreasing: {monotone}; |L_CD - L_CT| / L_CT at N=640: {relative:.4} (< 0.01)");
    Ok(res)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Scaled discrete losses and gradients at `N = 1000` against the
/// continuous-time objectives.
pub fn limits(opts: &TheoryOptions) -> Result<CheckResult> {
    let mut res = CheckResult::new(Check::Limits);
    let gm = GaussianMixture::two_component_unit();
    let model = toy_model(opts.seed ^ 0x61)?;
    let reparam = TimeReparam::linear(EPSILON, HORIZON)?;
    let batch = ContinuousBatch::draw(&gm, 4096, &mut seeded_rng(opts.seed ^ 0x62));
    let n = 1000;
    let scale = (n - 1) as f64;
    let p = model.params().len();
    let cd_pairs = discrete_cd_pairs(&gm, &batch, &reparam, n, SolverKind::Euler)?;
    let ct_pairs = discrete_ct_pairs(&batch, &reparam, n)?;

    let discrete = scale * scale * pair_loss_grad(&model, &model, &cd_pairs, Metric::SquaredL2, None);
    let continuous = cd_inf_l2(&model, &gm, &batch, &reparam)?;
    let value_rel = (discrete / continuous - 1.0).abs();

    let mut g_cd = vec![0.0; p];
    pair_loss_grad(&model, &model, &cd_pairs, Metric::SquaredL2, Some(&mut g_cd));
    let mut g_ct = vec![0.0; p];
    pair_loss_grad(&model, &model, &ct_pairs, Metric::SquaredL2, Some(&mut g_ct));
    let mut g_cd_inf = vec![0.0; p];
    cd_inf_stopgrad_l2(&model, &model, &gm, &batch, &reparam, Some(&mut g_cd_inf))?;
    let mut g_ct_inf = vec![0.0; p];
    ct_inf_stopgrad(&model, &model, &batch, &reparam, Some(&mut g_ct_inf))?;
    g_cd.iter_mut().chain(g_ct.iter_mut()).for_each(|g| *g *= scale);
    let (cos_cd, cos_ct) = (cosine(&g_cd, &g_cd_inf), cosine(&g_ct, &g_ct_inf));

    res.metric("scaled_discrete_loss", discrete);
    res.metric("cd_inf_l2", continuous);
    res.metric("value_relative_error", value_rel);
    res.metric("cd_gradient_cosine", cos_cd);
    res.metric("ct_gradient_cosine", cos_ct);
    res.passed = value_rel <= 0.05 && cos_cd > 0.99 && cos_ct > 0.99;
    res.detail = format!(
        "(N-1)^2 L_CD vs continuous: {value_rel:.4} rel (<= 0.05); gradient cosines cd {cos_cd:.5}, ct {cos_ct:.5} (> 0.99)"
    );
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_names_parse() {
        assert_eq!(Check::parse("lemma1").unwrap(), Check::Lemma1);
        assert_eq!(Check::parse("4").unwrap(), Check::CdFidelity);
        assert_eq!(Check::parse_list("limits, boundary,limits").unwrap(), vec![Check::Boundary, Check::Limits]);
        assert!(Check::parse("nope").is_err());
    }

    #[test]
    fn lattice_covers_every_time_above_epsilon() {
        let gm = GaussianMixture::two_component_unit();
        let grid = TimeGrid::karras(EPSILON, HORIZON, RHO, 5).unwrap();
        let pts = fidelity_lattice(&gm, &grid);
        assert_eq!(pts.len(), 4 * 25);
        assert!(pts.iter().all(|(_, t)| *t > EPSILON));
    }
}

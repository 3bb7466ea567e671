//! Generation, evaluation and editing commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmlab_core::batch::DataSource;
use cmlab_core::consistency::ConsistencyFn;
use cmlab_core::editing::{
    colorize_spec, edit, editing_grid, gray_channel, inpaint_spec, patch_means, sdedit_spec, superres_spec, EditSpec,
    Image,
};
use cmlab_core::evalbench::{metric_report, procedural_image, sliced_wasserstein, Dataset, MetricReport};
use cmlab_core::sampling::{greedy_timepoint_search, sample_multistep, SamplePlan, SearchConfig};
use cmlab_core::{seeded_rng, Batch};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::io::{read_image, read_points_csv, tile, write_json, write_points_csv, write_ppm, write_tensor};
use crate::runner::{load_sampler, oracle_checkpoint, Sampler};
use crate::theory::{self, Check, Report, TheoryOptions};

/// Serializable view of [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricJson {
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    pub mmd_rbf_unbiased: f64,
    pub energy_distance: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub projections: usize,
    pub projection_seed: u64,
    pub bandwidth: f64,
}

impl From<MetricReport> for MetricJson {
    fn from(r: MetricReport) -> Self {
        Self {
            sliced_wasserstein: r.sliced_wasserstein,
            mmd_rbf: r.mmd_rbf,
            mmd_rbf_unbiased: r.mmd_rbf_unbiased,
            energy_distance: r.energy_distance,
            count_a: r.count_a,
            count_b: r.count_b,
            projections: r.projections,
            projection_seed: r.projection_seed,
            bandwidth: r.bandwidth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanJson {
    pub steps: usize,
    pub timepoints: Vec<f64>,
    pub searched: bool,
}

fn image_side(ds: &Dataset) -> Option<usize> {
    match ds {
        Dataset::ProceduralImages { size } => Some(*size),
        _ => None,
    }
}

/// Writes generated samples: a CSV always, plus a PPM/PNG grid for images.
pub fn write_samples(dir: &Path, stem: &str, samples: &Batch, ds: &Dataset) -> Result<Vec<PathBuf>> {
    let mut written = vec![dir.join(format!("{stem}.csv"))];
    write_points_csv(&written[0], samples)?;
    if let Some(size) = image_side(ds) {
        let images = samples
            .rows()
            .map(|r| Image::new(size, size, 3, r.to_vec()))
            .collect::<cmlab_core::Result<Vec<_>>>()?;
        if !images.is_empty() {
            let grid = tile(&images, (images.len() as f64).sqrt().ceil() as usize);
            let ppm = dir.join(format!("{stem}.ppm"));
            write_ppm(&ppm, &grid)?;
            written.push(ppm);
            #[cfg(feature = "png")]
            {
                let png = dir.join(format!("{stem}.png"));
                crate::io::write_png(&png, &grid)?;
                written.push(png);
            }
        }
    }
    Ok(written)
}

/// One-step generation.
pub fn sample(checkpoint: &Path, count: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, cfg) = load_sampler(checkpoint)?;
    let samples = sample_multistep(&model, &SamplePlan::one_step(), &mut seeded_rng(seed), count)?;
    write_samples(out, "samples", &samples, &cfg.dataset()?)
}

/// Picks the sampling plan: configured time points when they give `steps`
/// evaluations, otherwise a greedy ternary search on sliced Wasserstein
/// distance to fresh data.
pub fn plan_for(model: &Sampler, cfg: &RunConfig, steps: usize) -> Result<(SamplePlan, bool)> {
    if steps == 0 {
        return Err(LabError::Config("multistep needs at least one step".into()));
    }
    if let Some(tp) = cfg.sampling.timepoints.as_ref().filter(|tp| tp.len() + 1 == steps) {
        return Ok((SamplePlan::new(tp.clone(), model.epsilon(), model.horizon())?, false));
    }
    if steps == 1 {
        return Ok((SamplePlan::one_step(), false));
    }
    let ds = cfg.dataset()?;
    let s = &cfg.sampling;
    let reference = ds.sample_batch(s.eval_count, &mut seeded_rng(s.eval_seed ^ 0xda7a));
    let search = SearchConfig { max_steps: steps, search_iters: s.search_iters, eval_count: s.eval_count, eval_seed: s.eval_seed };
    let projections = s.projections;
    let plan = greedy_timepoint_search(
        model,
        |x| sliced_wasserstein(x, &reference, projections, &mut seeded_rng(s.eval_seed ^ 0x5eed)),
        &search,
    )?;
    Ok((plan, true))
}

pub fn multistep(checkpoint: &Path, steps: usize, count: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, cfg) = load_sampler(checkpoint)?;
    let (plan, searched) = plan_for(&model, &cfg, steps)?;
    let samples = sample_multistep(&model, &plan, &mut seeded_rng(seed), count)?;
    let mut written = write_samples(out, "samples", &samples, &cfg.dataset()?)?;
    let plan_path = out.join("plan.json");
    write_json(&plan_path, &PlanJson { steps: plan.steps(), timepoints: plan.timepoints().to_vec(), searched })?;
    written.push(plan_path);
    Ok(written)
}

/// Compares two point clouds; with one file, compares it with fresh data
/// drawn from the config's dataset.
pub fn eval(a: &Path, b: Option<&Path>, cfg: &RunConfig, seed: u64, out: &Path) -> Result<MetricJson> {
    let xa = read_points_csv(a)?;
    let xb = match b {
        Some(b) => read_points_csv(b)?,
        None => cfg.dataset()?.sample_batch(xa.len(), &mut seeded_rng(seed)),
    };
    if xa.dim() != xb.dim() {
        return Err(LabError::Config(format!("point clouds are {}-d and {}-d", xa.dim(), xb.dim())));
    }
    let report: MetricJson = metric_report(&xa, &xb, cfg.sampling.projections, cfg.sampling.eval_seed)?.into();
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EditTask {
    Inpaint,
    Colorize,
    Superres,
    Sdedit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditSummary {
    pub task: String,
    pub timepoints: Vec<f64>,
    pub constrained: usize,
    /// Constrained coordinates whose value differs from the target.
    pub violations: usize,
}

/// Builds the task's spec from a clean reference image.
pub fn edit_spec(task: EditTask, reference: &Image, timepoints: Vec<f64>) -> Result<EditSpec> {
    let (h, w, _) = reference.shape();
    Ok(match task {
        EditTask::Inpaint => {
            // the central half-size square is missing
            let missing: Vec<bool> =
                (0..h * w).map(|px| (h / 4..h - h / 4).contains(&(px / w)) && (w / 4..w - w / 4).contains(&(px % w))).collect();
            inpaint_spec(reference.clone(), &missing, timepoints)?
        }
        EditTask::Colorize => colorize_spec(&gray_channel(reference)?, timepoints)?,
        EditTask::Superres => superres_spec(&patch_means(reference, 2)?, 2, timepoints)?,
        EditTask::Sdedit => sdedit_spec(reference.clone(), None),
    })
}

/// Counts constrained coordinates of `image` that differ from the spec.
pub fn constraint_violations(spec: &EditSpec, image: &Image) -> Result<(usize, usize)> {
    let a = &spec.transform;
    let (got, want) = (a.apply(image)?, a.apply(&spec.reference)?);
    let mut constrained = 0;
    let mut bad = 0;
    for ((m, g), w) in spec.mask.iter().zip(got.as_slice()).zip(want.as_slice()) {
        if *m == 0.0 {
            constrained += 1;
            bad += usize::from(g.to_bits() != w.to_bits());
        }
    }
    Ok((constrained, bad))
}

pub fn edit_command(checkpoint: &Path, task: EditTask, input: Option<&Path>, seed: u64, out: &Path) -> Result<EditSummary> {
    let (model, cfg) = load_sampler(checkpoint)?;
    let ds = cfg.dataset()?;
    let size = image_side(&ds).ok_or_else(|| LabError::Config("editing needs an image dataset".into()))?;
    let reference = match input {
        Some(p) => read_image(p)?,
        None => procedural_image(size, &mut seeded_rng(seed ^ 0x1a6e)),
    };
    if reference.shape() != (size, size, 3) || model.dim() != size * size * 3 {
        return Err(LabError::Config(format!("input must be a {size}x{size} RGB image")));
    }
    let g = &cfg.grid;
    let timepoints = editing_grid(g.epsilon, g.horizon, g.rho, cfg.sampling.edit_steps)?;
    let spec = edit_spec(task, &reference, timepoints)?;
    let result = edit(&model, &spec, &mut seeded_rng(seed))?;
    let (constrained, violations) = constraint_violations(&spec, &result.image)?;

    write_ppm(&out.join("reference.ppm"), &reference)?;
    write_ppm(&out.join("input.ppm"), &spec.reference)?;
    write_ppm(&out.join("output.ppm"), &result.image)?;
    write_tensor(&out.join("output.cmt"), &result.image)?;
    #[cfg(feature = "png")]
    crate::io::write_png(&out.join("output.png"), &result.image)?;
    let summary = EditSummary {
        task: format!("{task:?}").to_lowercase(),
        timepoints: spec.timepoints.clone(),
        constrained,
        violations,
    };
    write_json(&out.join("edit.json"), &summary)?;
    Ok(summary)
}

/// Writes the closed-form Gaussian consistency model for the config's
/// single-component dataset.
pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let path = out.join("oracle.bin");
    oracle_checkpoint(cfg)?.save(&path)?;
    Ok(path)
}

/// Runs the theory checks and writes `verify_report.json` into `out`.
pub fn verify_theory(checks: &[Check], opts: &TheoryOptions, out: &Path) -> Result<Report> {
    let mut results = Vec::with_capacity(checks.len());
    for &check in checks {
        let started = Instant::now();
        let r = theory::run(check, opts)?;
        eprintln!(
            "{} {} ({:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            started.elapsed().as_secs_f64()
        );
        results.push(r);
    }
    let report = Report {
        format: theory::REPORT_FORMAT.into(),
        seed: opts.seed,
        passed: results.iter().all(|c| c.passed),
        checks: results,
    };
    write_json(&out.join("verify_report.json"), &report)?;
    Ok(report)
}

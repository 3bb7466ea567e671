//! Toy datasets and sample-based distribution distances.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::batch::{Batch, DataSource};
use crate::diffusion::GaussianMixture;
use crate::editing::Image;
use crate::error::{input_err, Result};
use crate::math;
use crate::{seeded_rng, Rng};

/// Default number of projections for [`sliced_wasserstein`].
pub const PROJECTIONS: usize = 128;

/// Side of the checkerboard in cells; the board spans `[-2, 2]^2`.
pub const CHECKER_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    GaussianMixture(GaussianMixture),
    /// 2-D spiral scaled to roughly unit standard deviation.
    SwissRoll { noise: f64 },
    /// Uniform on the dark cells of a [`CHECKER_CELLS`]-wide board.
    Checkerboard,
    /// `size x size` RGB images in `[-1, 1]` with a colored bar and blob.
    ProceduralImages { size: usize },
}

impl Dataset {
    pub fn name(&self) -> &'static str {
        match self {
            Dataset::GaussianMixture(_) => "gaussian_mixture",
            Dataset::SwissRoll { .. } => "swiss_roll",
            Dataset::Checkerboard => "checkerboard",
            Dataset::ProceduralImages { .. } => "procedural_images",
        }
    }

    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Dataset::GaussianMixture(gm) => Some(gm),
            _ => None,
        }
    }

    /// Whether `x` lies on a dark checkerboard cell.
    pub fn on_checkerboard(x: &[f64]) -> bool {
        let half = CHECKER_CELLS as f64 / 2.0;
        if x.len() != 2 || x.iter().any(|v| !(*v >= -half && *v < half)) {
            return false;
        }
        let i = math::floor(x[0] + half) as usize;
        let j = math::floor(x[1] + half) as usize;
        (i + j) % 2 == 0
    }
}

impl DataSource for Dataset {
    fn dim(&self) -> usize {
        match self {
            Dataset::GaussianMixture(gm) => gm.dim(),
            Dataset::SwissRoll { .. } | Dataset::Checkerboard => 2,
            Dataset::ProceduralImages { size } => size * size * 3,
        }
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        match self {
            Dataset::GaussianMixture(gm) => gm.sample_point(rng, out),
            Dataset::SwissRoll { noise } => {
                let t = core::f64::consts::PI * (1.5 + 3.0 * rng.random::<f64>());
                for (o, v) in out.iter_mut().zip([t * math::cos(t), t * math::sin(t)]) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = v / 7.0 + noise * z;
                }
            }
            Dataset::Checkerboard => {
                let cells = CHECKER_CELLS;
                let k = rng.random_range(0..cells * cells / 2);
                let i = k / (cells / 2);
                let j = 2 * (k % (cells / 2)) + (i % 2);
                let half = cells as f64 / 2.0;
                out[0] = i as f64 - half + rng.random::<f64>();
                out[1] = j as f64 - half + rng.random::<f64>();
            }
            Dataset::ProceduralImages { size } => {
                let img = procedural_image(*size, rng);
                out.copy_from_slice(img.as_slice());
            }
        }
    }
}

/// Draws `count` samples.
pub fn sample_data(ds: &Dataset, count: usize, rng: &mut Rng) -> Batch {
    ds.sample_batch(count, rng)
}

fn color(rng: &mut Rng) -> [f64; 3] {
    // correlated channels: a shared brightness plus a small tint
    let base = 1.6 * rng.random::<f64>() - 0.8;
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (base + 0.4 * (rng.random::<f64>() - 0.5)).clamp(-1.0, 1.0);
    }
    c
}

/// One image of a background, an axis-aligned bar and a square blob.
pub fn procedural_image(size: usize, rng: &mut Rng) -> Image {
    let mut img = Image::zeros(size, size, 3);
    let bg = color(rng);
    for i in 0..size {
        for j in 0..size {
            for k in 0..3 {
                img.set(i, j, k, bg[k]);
            }
        }
    }
    let bar = color(rng);
    let width = 1 + size / 8;
    let at = rng.random_range(0..=size - width);
    let vertical = rng.random::<bool>();
    for a in at..at + width {
        for b in 0..size {
            let (i, j) = if vertical { (b, a) } else { (a, b) };
            for k in 0..3 {
                img.set(i, j, k, bar[k]);
            }
        }
    }
    let blob = color(rng);
    let side = size / 4;
    let (bi, bj) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
    for i in bi..bi + side {
        for j in bj..bj + side {
            for k in 0..3 {
                img.set(i, j, k, blob[k]);
            }
        }
    }
    img
}

fn check_pair(a: &Batch, b: &Batch) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(input_err!("sample sets have dimensions {} and {}", a.dim(), b.dim()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(input_err!("sample sets must be nonempty"));
    }
    Ok(())
}

/// Random unit directions in `dim` dimensions.
pub fn projections(dim: usize, count: usize, rng: &mut Rng) -> Batch {
    let mut out = Batch::zeros(dim, count);
    for i in 0..count {
        loop {
            let row = out.row_mut(i);
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = math::norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    out
}

fn sorted_projection(x: &Batch, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = x.rows().map(|r| math::dot(r, dir)).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// 1-D 2-Wasserstein distance between two sorted samples, matching
/// quantiles on the finer of the two grids.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len().max(b.len());
    let mut s = 0.0;
    for i in 0..k {
        let u = (i as f64 + 0.5) / k as f64;
        let qa = a[((u * a.len() as f64) as usize).min(a.len() - 1)];
        let qb = b[((u * b.len() as f64) as usize).min(b.len() - 1)];
        s += (qa - qb) * (qa - qb);
    }
    math::sqrt(s / k as f64)
}

/// Mean 1-D 2-Wasserstein distance over `count` random projections.
pub fn sliced_wasserstein(a: &Batch, b: &Batch, count: usize, rng: &mut Rng) -> Result<f64> {
    check_pair(a, b)?;
    if count == 0 {
        return Err(input_err!("need at least one projection"));
    }
    let dirs = projections(a.dim(), count, rng);
    Ok(sliced_wasserstein_with(a, b, &dirs))
}

/// [`sliced_wasserstein`] with explicit directions.
pub fn sliced_wasserstein_with(a: &Batch, b: &Batch, dirs: &Batch) -> f64 {
    let total: f64 = dirs.rows().map(|d| wasserstein_1d(&sorted_projection(a, d), &sorted_projection(b, d))).sum();
    total / dirs.len() as f64
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance of the pooled sample; 1 if that is zero.
pub fn median_bandwidth(a: &Batch, b: &Batch) -> f64 {
    let pooled: Vec<&[f64]> = a.rows().chain(b.rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len().saturating_sub(1)) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(dist_sq(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = math::sqrt(*m);
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd {
    /// Unbiased estimate of squared MMD; may be slightly negative.
    pub unbiased: f64,
    /// Biased estimate of squared MMD, clipped at zero.
    pub biased: f64,
    pub bandwidth: f64,
}

fn kernel_sum(a: &Batch, b: &Batch, gamma: f64, skip_diagonal: bool) -> f64 {
    let mut s = 0.0;
    for (i, x) in a.rows().enumerate() {
        for (j, y) in b.rows().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            s += math::exp(-gamma * dist_sq(x, y));
        }
    }
    s
}

/// Squared MMD with the Gaussian kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: &Batch, b: &Batch, bandwidth: Option<f64>) -> Result<Mmd> {
    check_pair(a, b)?;
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    if !(h > 0.0) {
        return Err(input_err!("bandwidth must be positive"));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let kab = kernel_sum(a, b, gamma, false);
    let kaa = kernel_sum(a, a, gamma, false);
    let kbb = kernel_sum(b, b, gamma, false);
    let biased = (kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n)).max(0.0);
    let unbiased = if m > 1.0 && n > 1.0 {
        (kaa - m) / (m * (m - 1.0)) + (kbb - n) / (n * (n - 1.0)) - 2.0 * kab / (m * n)
    } else {
        biased
    };
    Ok(Mmd { unbiased, biased, bandwidth: h })
}

fn mean_distance(a: &Batch, b: &Batch) -> f64 {
    let mut s = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            s += math::sqrt(dist_sq(x, y));
        }
    }
    s / (a.len() as f64 * b.len() as f64)
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all pairs (V-statistic),
/// clipped at zero.
pub fn energy_distance(a: &Batch, b: &Batch) -> Result<f64> {
    check_pair(a, b)?;
    Ok((2.0 * mean_distance(a, b) - mean_distance(a, a) - mean_distance(b, b)).max(0.0))
}

/// All three distances on one pair of sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
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

pub fn metric_report(a: &Batch, b: &Batch, projections: usize, projection_seed: u64) -> Result<MetricReport> {
    let sw = sliced_wasserstein(a, b, projections, &mut seeded_rng(projection_seed))?;
    let mmd = mmd_rbf(a, b, None)?;
    let ed = energy_distance(a, b)?;
    Ok(MetricReport {
        sliced_wasserstein: sw,
        mmd_rbf: mmd.biased,
        mmd_rbf_unbiased: mmd.unbiased,
        energy_distance: ed,
        count_a: a.len(),
        count_b: b.len(),
        projections,
        projection_seed,
        bandwidth: mmd.bandwidth,
    })
}

/// Rescales every coordinate of a batch by a constant.
pub fn scaled(x: &Batch, factor: f64) -> Batch {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(dim: usize, count: usize, shift: f64, seed: u64) -> Batch {
        let mut b = Batch::standard_normal(dim, count, &mut seeded_rng(seed));
        b.as_mut_slice().iter_mut().for_each(|v| *v += shift);
        b
    }

    #[test]
    fn single_component_mean_is_within_clt_bound() {
        let gm = GaussianMixture::gaussian(&[1.0, -2.0], 0.5).unwrap();
        let ds = Dataset::GaussianMixture(gm);
        let n = 20_000;
        let b = sample_data(&ds, n, &mut seeded_rng(1));
        let mean = b.mean();
        let bound = 3.0 * 0.5f64.sqrt() / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() < bound && (mean[1] + 2.0).abs() < bound);
        assert!(sample_data(&ds, 0, &mut seeded_rng(1)).is_empty());
    }

    #[test]
    fn checkerboard_membership() {
        let b = sample_data(&Dataset::Checkerboard, 5000, &mut seeded_rng(2));
        assert!(b.rows().all(Dataset::on_checkerboard));
        assert!(!Dataset::on_checkerboard(&[-1.5, -0.5]));
        assert!(Dataset::on_checkerboard(&[-1.5, -1.5]));
    }

    #[test]
    fn samplers_are_deterministic() {
        for ds in [Dataset::SwissRoll { noise: 0.05 }, Dataset::Checkerboard, Dataset::ProceduralImages { size: 8 }] {
            let a = sample_data(&ds, 10, &mut seeded_rng(3));
            let b = sample_data(&ds, 10, &mut seeded_rng(3));
            assert_eq!(a, b);
            assert!(a.as_slice().iter().all(|v| v.is_finite()));
        }
        let img = sample_data(&Dataset::ProceduralImages { size: 16 }, 4, &mut seeded_rng(4));
        assert!(img.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sliced_wasserstein_basic_cases() {
        let a = gaussian(3, 200, 0.0, 5);
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut seeded_rng(0)).unwrap(), 0.0);
        let p0 = Batch::from_rows(1, &[[0.0]]).unwrap();
        let p1 = Batch::from_rows(1, &[[1.0]]).unwrap();
        assert_eq!(sliced_wasserstein(&p0, &p1, 8, &mut seeded_rng(0)).unwrap(), 1.0);
        assert!(sliced_wasserstein(&Batch::zeros(1, 0), &p1, 8, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn sliced_wasserstein_gaussian_shift() {
        let delta = 0.7;
        let a = gaussian(1, 20_000, 0.0, 6);
        let b = gaussian(1, 20_000, delta, 7);
        let sw = sliced_wasserstein(&a, &b, 4, &mut seeded_rng(1)).unwrap();
        assert!((sw - delta).abs() < 0.03, "{sw}");
    }

    #[test]
    fn sliced_wasserstein_rotation_invariance() {
        let a = gaussian(2, 300, 0.0, 8);
        let b = gaussian(2, 250, 0.5, 9);
        let dirs = projections(2, 32, &mut seeded_rng(3));
        let (c, s) = (0.6, 0.8);
        let rot = |x: &Batch| {
            let rows: Vec<[f64; 2]> = x.rows().map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
            Batch::from_rows(2, &rows).unwrap()
        };
        let rdirs = rot(&dirs);
        let before = sliced_wasserstein_with(&a, &b, &dirs);
        let after = sliced_wasserstein_with(&rot(&a), &rot(&b), &rdirs);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_zero_on_identical_sets() {
        let a = gaussian(2, 100, 0.0, 10);
        let b = gaussian(2, 80, 0.3, 11);
        let ab = metric_report(&a, &b, 32, 1).unwrap();
        let ba = metric_report(&b, &a, 32, 1).unwrap();
        assert!((ab.sliced_wasserstein - ba.sliced_wasserstein).abs() < 1e-12);
        assert!((ab.mmd_rbf - ba.mmd_rbf).abs() < 1e-12);
        assert!((ab.energy_distance - ba.energy_distance).abs() < 1e-12);
        let aa = metric_report(&a, &a, 32, 1).unwrap();
        assert_eq!(aa.sliced_wasserstein, 0.0);
        assert_eq!(aa.mmd_rbf, 0.0);
        assert_eq!(aa.energy_distance, 0.0);
    }

    #[test]
    fn separation_sweep_is_monotone() {
        let a = gaussian(2, 100, 0.0, 12);
        let base = gaussian(2, 100, 0.0, 13);
        let (mut prev_mmd, mut prev_ed) = (-1.0, -1.0);
        for shift in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let b = {
                let mut b = base.clone();
                b.as_mut_slice().iter_mut().for_each(|v| *v += shift);
                b
            };
            let mmd = mmd_rbf(&a, &b, Some(1.0)).unwrap().biased;
            let ed = energy_distance(&a, &b).unwrap();
            assert!(mmd > prev_mmd && ed > prev_ed);
            prev_mmd = mmd;
            prev_ed = ed;
        }
    }

    #[test]
    fn mmd_matches_reference_implementation() {
        let a = gaussian(2, 40, 0.0, 14);
        let b = gaussian(2, 30, 0.4, 15);
        let got = mmd_rbf(&a, &b, None).unwrap();
        // reference: explicit Gram matrix over the pooled sample
        let pooled: Vec<Vec<f64>> = a.rows().chain(b.rows()).map(|r| r.to_vec()).collect();
        let mut dists: Vec<f64> = Vec::new();
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                let d: f64 = pooled[i].iter().zip(&pooled[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                dists.push(d);
            }
        }
        dists.sort_by(f64::total_cmp);
        let h = dists[dists.len() / 2];
        let k = |i: usize, j: usize| {
            let d: f64 = pooled[i].iter().zip(&pooled[j]).map(|(x, y)| (x - y).powi(2)).sum();
            (-d / (2.0 * h * h)).exp()
        };
        let (m, n) = (40, 30);
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    xx += k(i, j);
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    yy += k(m + i, m + j);
                }
            }
        }
        for i in 0..m {
            for j in 0..n {
                xy += k(i, m + j);
            }
        }
        let want = xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64;
        assert!((got.bandwidth - h).abs() < 1e-12);
        assert!((got.unbiased - want).abs() < 1e-12);
    }
}

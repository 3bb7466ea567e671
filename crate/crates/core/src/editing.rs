//! Zero-shot editing with a trained consistency model: iterative
//! replacement in the range of an invertible linear map, plus the task
//! constructions built on it (inpainting, colorization, super-resolution,
//! stroke-guided generation), denoising and latent interpolation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::consistency::ConsistencyFn;
use crate::diffusion::{EPSILON, HORIZON, RHO};
use crate::error::{input_err, Result};
use crate::math;
use crate::{seeded_rng, Batch, Rng};

/// Luma weights for RGB to gray.
pub const LUMA: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// Stroke-guided editing times.
pub const SDEDIT_TIMES: [f64; 2] = [5.38, 2.24];

/// Default editing grid length at desk scale.
pub const EDIT_STEPS: usize = 12;

/// A dense `height x width x channels` image, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(input_err!("{height}x{width}x{channels} image needs {} values, got {}", height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.width + j) * self.channels + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Reshapes a flat vector of the same size.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Image::new(self.height, self.width, self.channels, data)
    }
}

/// Invertible linear maps used by the editing tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearTransform {
    Identity,
    /// `y[i, j, k] = sum_l x[i, j, l] q[l, k]` with an orthogonal `q`.
    ChannelMix { q: Vec<f64>, channels: usize },
    /// Each `p x p` patch of each channel, flattened row-major into a
    /// vector `v`, becomes `c[k] = sum_l v[l] q[l, k]`, stored back in the
    /// patch in the same row-major order.
    PatchMix { p: usize, q: Vec<f64> },
}

impl LinearTransform {
    pub fn colorization() -> Self {
        LinearTransform::ChannelMix { q: colorization_q().to_vec(), channels: 3 }
    }

    pub fn super_resolution(p: usize) -> Result<Self> {
        Ok(LinearTransform::PatchMix { p, q: patch_q(p)? })
    }

    /// Size of each independent group and the matrix acting on it.
    fn group(&self) -> Option<(usize, &[f64])> {
        match self {
            LinearTransform::Identity => None,
            LinearTransform::ChannelMix { q, channels } => Some((*channels, q)),
            LinearTransform::PatchMix { p, q } => Some((p * p, q)),
        }
    }

    fn check_shape(&self, img: &Image) -> Result<()> {
        match self {
            LinearTransform::Identity => Ok(()),
            LinearTransform::ChannelMix { channels, .. } => {
                if img.channels != *channels {
                    return Err(input_err!("channel mix expects {channels} channels, image has {}", img.channels));
                }
                Ok(())
            }
            LinearTransform::PatchMix { p, .. } => {
                if *p == 0 || img.height % p != 0 || img.width % p != 0 {
                    return Err(input_err!("{}x{} image is not divisible into {p}x{p} patches", img.height, img.width));
                }
                Ok(())
            }
        }
    }

    /// Flat indices of every group, in group-vector order.
    fn groups(&self, img: &Image) -> Vec<Vec<usize>> {
        match self {
            LinearTransform::Identity => vec![],
            LinearTransform::ChannelMix { channels, .. } => {
                (0..img.height * img.width).map(|px| (0..*channels).map(|k| px * channels + k).collect()).collect()
            }
            LinearTransform::PatchMix { p, .. } => {
                let mut out = vec![];
                for bi in 0..img.height / p {
                    for bj in 0..img.width / p {
                        for c in 0..img.channels {
                            let mut idx = Vec::with_capacity(p * p);
                            for di in 0..*p {
                                for dj in 0..*p {
                                    idx.push(img.index(bi * p + di, bj * p + dj, c));
                                }
                            }
                            out.push(idx);
                        }
                    }
                }
                out
            }
        }
    }

    fn map(&self, img: &Image, inverse: bool) -> Result<Image> {
        self.check_shape(img)?;
        let Some((m, q)) = self.group() else {
            return Ok(img.clone());
        };
        let mut out = img.clone();
        let mut v = vec![0.0; m];
        for idx in self.groups(img) {
            for (slot, &i) in v.iter_mut().zip(&idx) {
                *slot = img.data[i];
            }
            for (k, &i) in idx.iter().enumerate() {
                out.data[i] = if inverse { inverse_coef(q, m, &v, k) } else { forward_coef(q, m, &v, k) };
            }
        }
        Ok(out)
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.map(img, false)
    }

    pub fn inverse(&self, img: &Image) -> Result<Image> {
        self.map(img, true)
    }

    /// Largest entry of `|Q^T Q - I|`; zero for the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let Some((m, q)) = self.group() else {
            return 0.0;
        };
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                let dot: f64 = (0..m).map(|l| q[l * m + a] * q[l * m + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max(math::abs(dot - want));
            }
        }
        worst
    }

    fn validate(&self, shape_of: &Image) -> Result<()> {
        self.check_shape(shape_of)?;
        if let Some((m, q)) = self.group() {
            if q.len() != m * m {
                return Err(input_err!("transform matrix must be {m}x{m}"));
            }
        }
        // round trip on a fixed random image
        let mut rng = seeded_rng(0x5eed);
        let x: Vec<f64> = (0..shape_of.data.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x = shape_of.with_data(x)?;
        let back = self.inverse(&self.apply(&x)?)?;
        let err = x.data.iter().zip(&back.data).map(|(a, b)| math::abs(a - b)).fold(0.0, f64::max);
        if !(err <= 1e-10) {
            return Err(input_err!("transform is not invertible: round-trip error {err:e}"));
        }
        Ok(())
    }
}

fn forward_coef(q: &[f64], m: usize, v: &[f64], k: usize) -> f64 {
    let col: Vec<f64> = (0..m).map(|l| q[l * m + k]).collect();
    math::dot2(v, &col)
}

fn inverse_coef(q: &[f64], m: usize, v: &[f64], k: usize) -> f64 {
    math::dot2(v, &q[k * m..(k + 1) * m])
}

/// Orthogonal `3x3` matrix whose first column is the normalized luma vector.
/// The remaining columns are `q0 x q2` and `-(w x e_2) / |w x e_2|`, which
/// reproduces the signs of the matrix used in the literature.
pub fn colorization_q() -> [f64; 9] {
    let w = LUMA;
    let nw = math::norm(&w);
    let q0 = [w[0] / nw, w[1] / nw, w[2] / nw];
    // w x e_2 = (-w_2, 0, w_0)
    let c = [-w[2], 0.0, w[0]];
    let nc = math::norm(&c);
    let q2 = [-c[0] / nc, 0.0, -c[2] / nc];
    let q1 = [
        q0[1] * q2[2] - q0[2] * q2[1],
        q0[2] * q2[0] - q0[0] * q2[2],
        q0[0] * q2[1] - q0[1] * q2[0],
    ];
    let mut q = [0.0; 9];
    for l in 0..3 {
        q[l * 3] = q0[l];
        q[l * 3 + 1] = q1[l];
        q[l * 3 + 2] = q2[l];
    }
    q
}

/// Householder reflection `p^2 x p^2` sending `e_1` to `(1/p, ..., 1/p)`.
/// The first column is then set to exactly `1/p`.
pub fn patch_q(p: usize) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(input_err!("patch size must be positive"));
    }
    let m = p * p;
    let u = 1.0 / p as f64;
    let mut v = vec![-u; m];
    v[0] += 1.0;
    let vv = math::norm_sq(&v);
    let mut q = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            let id = if a == b { 1.0 } else { 0.0 };
            q[a * m + b] = if vv == 0.0 { id } else { id - 2.0 * v[a] * v[b] / vv };
        }
    }
    for l in 0..m {
        q[l * m] = u;
    }
    Ok(q)
}

/// Inputs to [`edit`]. `mask` lives in transformed space: 1 marks free
/// coordinates, 0 constrained ones.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub reference: Image,
    pub transform: LinearTransform,
    pub mask: Vec<f64>,
    pub timepoints: Vec<f64>,
}

impl EditSpec {
    pub fn validate(&self, epsilon: f64, horizon: f64) -> Result<()> {
        if self.mask.len() != self.reference.data.len() {
            return Err(input_err!("mask has {} entries, image has {}", self.mask.len(), self.reference.data.len()));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(input_err!("mask entries must be 0 or 1"));
        }
        if self.timepoints.is_empty() {
            return Err(input_err!("at least one time point is required"));
        }
        for (i, &t) in self.timepoints.iter().enumerate() {
            if !(t >= epsilon && t <= horizon) {
                return Err(input_err!("time point {t} is outside [{epsilon}, {horizon}]"));
            }
            if i > 0 && t >= self.timepoints[i - 1] {
                return Err(input_err!("time points must be strictly decreasing"));
            }
        }
        self.transform.validate(&self.reference)
    }
}

/// Result of [`edit`]: the image and its transformed-space coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub image: Image,
    pub latent: Image,
}

/// `t_i = (T^{1/rho} + (i-1)/(N-1) (eps^{1/rho} - T^{1/rho}))^rho`, from `T`
/// down to `eps`.
pub fn editing_grid(epsilon: f64, horizon: f64, rho: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(input_err!("editing grid needs at least 2 points"));
    }
    if !(epsilon > 0.0 && epsilon < horizon && rho > 0.0) {
        return Err(input_err!("need 0 < epsilon < T and rho > 0"));
    }
    let (a, b) = (math::powf(horizon, 1.0 / rho), math::powf(epsilon, 1.0 / rho));
    let mut t: Vec<f64> =
        (0..n).map(|i| math::powf(a + i as f64 / (n - 1) as f64 * (b - a), rho)).collect();
    t[0] = horizon;
    t[n - 1] = epsilon;
    Ok(t)
}

/// Default editing schedule at desk scale.
pub fn default_timepoints() -> Vec<f64> {
    editing_grid(EPSILON, HORIZON, RHO, EDIT_STEPS).expect("constants are valid")
}

/// Combines constrained coordinates of `target` with free coordinates of `x`.
fn replace(target: &Image, x: &Image, mask: &[f64]) -> Image {
    let data = target.data.iter().zip(&x.data).zip(mask).map(|((y, v), &m)| if m == 0.0 { *y } else { *v }).collect();
    Image { data, ..x.clone() }
}

/// Nudges `x` by a few ulps so that the constrained coordinates of `A(x)`
/// reproduce `target` bit for bit. Only groups with a single constrained
/// coordinate are adjusted; identity transforms are already exact. A group
/// can stay unmatched when its target is many orders of magnitude below its
/// inputs (near-total cancellation); the number of such groups is returned.
pub fn enforce_constraints(transform: &LinearTransform, x: &mut Image, target: &Image, mask: &[f64]) -> usize {
    let Some((m, q)) = transform.group() else {
        return 0;
    };
    let mut misses = 0;
    let mut v = vec![0.0; m];
    for idx in transform.groups(x) {
        let fixed: Vec<usize> = (0..m).filter(|&k| mask[idx[k]] == 0.0).collect();
        let [k] = fixed[..] else {
            continue;
        };
        let want = target.data[idx[k]];
        for (slot, &i) in v.iter_mut().zip(&idx) {
            *slot = x.data[i];
        }
        if !match_coefficient(q, m, k, &mut v, want) {
            misses += 1;
        }
        for (slot, &i) in v.iter().zip(&idx) {
            x.data[i] = *slot;
        }
    }
    misses
}

fn match_coefficient(q: &[f64], m: usize, k: usize, v: &mut [f64], want: f64) -> bool {
    let mut order: Vec<usize> = (0..m).filter(|&l| q[l * m + k] != 0.0).collect();
    order.sort_by(|&a, &b| math::abs(q[b * m + k]).total_cmp(&math::abs(q[a * m + k])));
    let Some(&lead) = order.first() else {
        return forward_coef(q, m, v, k) == want;
    };
    let got = forward_coef(q, m, v, k);
    if got != want {
        v[lead] += (want - got) / q[lead * m + k];
    }
    let start = v.to_vec();
    for &l in &order {
        v.copy_from_slice(&start);
        if walk(q, m, k, v, l, want) {
            return true;
        }
    }
    // a single component can step over the target: offset a second one by
    // some ulps and solve for the first from the residual
    let col: Vec<f64> = (0..m).map(|l| q[l * m + k]).collect();
    for &a in &order {
        for &b in &order {
            if a == b {
                continue;
            }
            let (mut up, mut down) = (start[a], start[a]);
            for _ in 0..16384 {
                up = up.next_up();
                down = down.next_down();
                for moved in [up, down] {
                    v.copy_from_slice(&start);
                    v[a] = moved;
                    let residual = want - math::dot2(v, &col);
                    v[b] += residual / col[b];
                    if walk(q, m, k, v, b, want) {
                        return true;
                    }
                }
            }
        }
    }
    v.copy_from_slice(&start);
    false
}

fn walk(q: &[f64], m: usize, k: usize, v: &mut [f64], l: usize, want: f64) -> bool {
    let w = q[l * m + k];
    let mut last_up = None;
    for _ in 0..64 {
        let got = forward_coef(q, m, v, k);
        if got == want {
            return true;
        }
        let up = (want > got) == (w > 0.0);
        if last_up == Some(!up) {
            return false;
        }
        last_up = Some(up);
        v[l] = if up { v[l].next_up() } else { v[l].next_down() };
    }
    false
}

fn add_noise(x: &mut Image, scale: f64, rng: &mut Rng) {
    for v in &mut x.data {
        let z: f64 = rng.sample(StandardNormal);
        *v += scale * z;
    }
}

fn apply_model<F: ConsistencyFn + ?Sized>(model: &F, x: &Image, t: f64) -> Image {
    let mut out = x.clone();
    model.apply(&x.data, t, &mut out.data);
    out
}

/// Iterative replacement: pre-mask the reference, start from
/// `N(y, t_1^2 I)`, denoise, re-impose the constraints in transformed space,
/// and repeat with fresh noise of variance `t_n^2 - eps^2`.
pub fn edit<F: ConsistencyFn + ?Sized>(model: &F, spec: &EditSpec, rng: &mut Rng) -> Result<EditOutput> {
    let eps = model.epsilon();
    spec.validate(eps, model.horizon())?;
    if spec.reference.data.len() != model.dim() {
        return Err(input_err!("model is {}-d, image has {} values", model.dim(), spec.reference.data.len()));
    }
    let a = &spec.transform;
    let ay = a.apply(&spec.reference)?;
    let zeros = Image { data: vec![0.0; ay.data.len()], ..ay.clone() };
    let target = replace(&ay, &zeros, &spec.mask);
    let y = a.inverse(&target)?;

    let mut x = y.clone();
    add_noise(&mut x, spec.timepoints[0], rng);
    x = apply_model(model, &x, spec.timepoints[0]);
    x = a.inverse(&replace(&target, &a.apply(&x)?, &spec.mask))?;
    for &t in &spec.timepoints[1..] {
        add_noise(&mut x, math::sqrt(t * t - eps * eps), rng);
        x = apply_model(model, &x, t);
        x = a.inverse(&replace(&target, &a.apply(&x)?, &spec.mask))?;
    }
    let _ = enforce_constraints(a, &mut x, &target, &spec.mask);
    let latent = a.apply(&x)?;
    Ok(EditOutput { image: x, latent })
}

/// `A = I`; `missing[i * width + j] = true` frees that pixel in all channels.
pub fn inpaint_spec(reference: Image, missing: &[bool], timepoints: Vec<f64>) -> Result<EditSpec> {
    let (h, w, c) = reference.shape();
    if missing.len() != h * w {
        return Err(input_err!("pixel mask must have {} entries", h * w));
    }
    let mask = (0..h * w).flat_map(|px| core::iter::repeat_n(if missing[px] { 1.0 } else { 0.0 }, c)).collect();
    Ok(EditSpec { reference, transform: LinearTransform::Identity, mask, timepoints })
}

/// Gray coordinate of an RGB image: channel 0 after the colorization map.
pub fn gray_channel(img: &Image) -> Result<Image> {
    let t = LinearTransform::colorization().apply(img)?;
    let (h, w, _) = img.shape();
    Image::new(h, w, 1, (0..h * w).map(|px| t.data[px * 3]).collect())
}

/// Colorization of a one-channel gray image given in the coordinate of
/// [`gray_channel`]: channel 0 is constrained, channels 1 and 2 are free.
pub fn colorize_spec(gray: &Image, timepoints: Vec<f64>) -> Result<EditSpec> {
    let (h, w, c) = gray.shape();
    if c != 1 {
        return Err(input_err!("gray image must have one channel"));
    }
    let transform = LinearTransform::colorization();
    let mut latent = Image::zeros(h, w, 3);
    let mut mask = vec![1.0; h * w * 3];
    for px in 0..h * w {
        latent.data[px * 3] = gray.data[px];
        mask[px * 3] = 0.0;
    }
    let mut reference = transform.inverse(&latent)?;
    let _ = enforce_constraints(&transform, &mut reference, &latent, &mask);
    Ok(EditSpec { reference, transform, mask, timepoints })
}

/// Per-patch channel means of an image, read off the first patch
/// coefficient (`p` times the mean).
pub fn patch_means(img: &Image, p: usize) -> Result<Image> {
    let latent = LinearTransform::super_resolution(p)?.apply(img)?;
    let (h, w, c) = img.shape();
    let mut out = Image::zeros(h / p, w / p, c);
    for bi in 0..h / p {
        for bj in 0..w / p {
            for k in 0..c {
                out.set(bi, bj, k, latent.get(bi * p, bj * p, k) / p as f64);
            }
        }
    }
    Ok(out)
}

/// Super-resolution from a low-resolution image: the first patch
/// coefficient (`p` times the patch mean) is constrained, all others free.
pub fn superres_spec(low: &Image, p: usize, timepoints: Vec<f64>) -> Result<EditSpec> {
    let transform = LinearTransform::super_resolution(p)?;
    let (h, w, c) = low.shape();
    let mut latent = Image::zeros(h * p, w * p, c);
    let mut mask = vec![1.0; latent.data.len()];
    for bi in 0..h {
        for bj in 0..w {
            for k in 0..c {
                let idx = latent.index(bi * p, bj * p, k);
                latent.data[idx] = p as f64 * low.get(bi, bj, k);
                mask[idx] = 0.0;
            }
        }
    }
    let mut reference = transform.inverse(&latent)?;
    let _ = enforce_constraints(&transform, &mut reference, &latent, &mask);
    Ok(EditSpec { reference, transform, mask, timepoints })
}

/// Stroke-guided generation: nothing is constrained.
pub fn sdedit_spec(strokes: Image, timepoints: Option<Vec<f64>>) -> EditSpec {
    let mask = vec![1.0; strokes.data.len()];
    let timepoints = timepoints.unwrap_or_else(|| SDEDIT_TIMES.to_vec());
    EditSpec { reference: strokes, transform: LinearTransform::Identity, mask, timepoints }
}

/// `f(x, sigma)` for a noisy batch.
pub fn denoise<F: ConsistencyFn + ?Sized>(model: &F, x: &Batch, sigma: f64) -> Result<Batch> {
    crate::consistency::consistency_apply(model, x, sigma)
}

/// Spherical interpolation of two latents.
pub fn slerp(z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(input_err!("latents have different dimensions"));
    }
    let (n1, n2) = (math::norm(z1), math::norm(z2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(input_err!("latents must be nonzero"));
    }
    let cos = (math::dot(z1, z2) / (n1 * n2)).clamp(-1.0, 1.0);
    let psi = math::acos(cos);
    let s = math::sin(psi);
    if cos == -1.0 || s == 0.0 && cos < 0.0 {
        return Err(input_err!("antiparallel latents have no unique interpolation"));
    }
    if s == 0.0 {
        return Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect());
    }
    let (w1, w2) = (math::sin((1.0 - alpha) * psi) / s, math::sin(alpha * psi) / s);
    Ok(z1.iter().zip(z2).map(|(a, b)| w1 * a + w2 * b).collect())
}

/// `f(slerp(z1, z2, alpha), T)`.
pub fn interpolate<F: ConsistencyFn + ?Sized>(model: &F, z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != model.dim() {
        return Err(input_err!("model is {}-d, latent is {}-d", model.dim(), z1.len()));
    }
    let z = slerp(z1, z2, alpha)?;
    let mut out = vec![0.0; z.len()];
    model.apply(&z, model.horizon(), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianFlow;

    fn flow(dim: usize) -> GaussianFlow {
        GaussianFlow::new(&vec![0.1; dim], 0.2, EPSILON, HORIZON)
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn colorization_q_matches_printed_matrix() {
        let printed = [0.4471, -0.8204, 0.3563, 0.8780, 0.4785, 0.0, 0.1705, -0.3129, -0.9343];
        let q = colorization_q();
        for (a, b) in q.iter().zip(printed) {
            assert!((a - b).abs() < 1e-4, "{q:?}");
        }
        assert!(LinearTransform::colorization().orthogonality_error() < 1e-10);
    }

    #[test]
    fn patch_q_first_column_and_orthogonality() {
        for p in 1..=4 {
            let q = patch_q(p).unwrap();
            let m = p * p;
            for l in 0..m {
                assert!((q[l * m] - 1.0 / p as f64).abs() < 1e-12);
            }
            assert!(LinearTransform::PatchMix { p, q }.orthogonality_error() < 1e-10);
        }
    }

    #[test]
    fn transforms_round_trip() {
        let img = random_image(8, 8, 3, 1);
        for t in [LinearTransform::Identity, LinearTransform::colorization(), LinearTransform::super_resolution(2).unwrap(), LinearTransform::super_resolution(4).unwrap()] {
            let back = t.inverse(&t.apply(&img).unwrap()).unwrap();
            for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(LinearTransform::super_resolution(3).unwrap().apply(&img).is_err());
    }

    #[test]
    fn non_invertible_transform_is_rejected() {
        let spec = EditSpec {
            reference: Image::zeros(2, 2, 3),
            transform: LinearTransform::ChannelMix { q: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], channels: 3 },
            mask: vec![1.0; 12],
            timepoints: vec![1.0],
        };
        assert!(spec.validate(EPSILON, HORIZON).is_err());
    }

    #[test]
    fn fully_constrained_identity_returns_reference() {
        let y = random_image(4, 4, 3, 2);
        let spec = inpaint_spec(y.clone(), &[false; 16], default_timepoints()).unwrap();
        let out = edit(&flow(48), &spec, &mut seeded_rng(3)).unwrap();
        assert_eq!(out.image, y);
    }

    #[test]
    fn unconstrained_identity_is_multistep_sampling_from_y() {
        let y = random_image(2, 2, 3, 4);
        let times = vec![10.0, 1.0];
        let spec = inpaint_spec(y.clone(), &[true; 4], times.clone()).unwrap();
        let f = flow(12);
        let out = edit(&f, &spec, &mut seeded_rng(5)).unwrap();
        // with every pixel free the pre-masked reference is zero
        let mut rng = seeded_rng(5);
        let mut x: Vec<f64> = (0..12).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut tmp = vec![0.0; 12];
        f.apply(&x, 10.0, &mut tmp);
        let s = (1.0 - EPSILON * EPSILON).sqrt();
        for v in tmp.iter_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
        f.apply(&tmp, 1.0, &mut x);
        assert_eq!(out.image.as_slice(), &x[..]);
    }

    #[test]
    fn inpainting_keeps_known_pixels() {
        let y = random_image(8, 8, 3, 6);
        let missing: Vec<bool> = (0..64).map(|px| px % 8 >= 4).collect();
        let spec = inpaint_spec(y.clone(), &missing, default_timepoints()).unwrap();
        let out = edit(&flow(192), &spec, &mut seeded_rng(7)).unwrap();
        let mut changed = false;
        for px in 0..64 {
            for k in 0..3 {
                let (a, b) = (out.image.as_slice()[px * 3 + k], y.as_slice()[px * 3 + k]);
                if missing[px] {
                    changed |= a != b;
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert!(changed);
    }

    #[test]
    fn colorization_preserves_gray_exactly() {
        let rgb = random_image(4, 4, 3, 8);
        let gray = gray_channel(&rgb).unwrap();
        let spec = colorize_spec(&gray, default_timepoints()).unwrap();
        let out = edit(&flow(48), &spec, &mut seeded_rng(9)).unwrap();
        let got = gray_channel(&out.image).unwrap();
        for (a, b) in got.as_slice().iter().zip(gray.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn superres_preserves_patch_means_exactly() {
        for p in [2, 4] {
            let low = random_image(2, 2, 3, 10 + p as u64);
            let spec = superres_spec(&low, p, default_timepoints()).unwrap();
            let out = edit(&flow(4 * p * p * 3), &spec, &mut seeded_rng(11)).unwrap();
            let means = patch_means(&out.image, p).unwrap();
            for (a, b) in means.as_slice().iter().zip(low.as_slice()) {
                assert_eq!(a.to_bits(), b.to_bits(), "p={p}");
            }
        }
    }

    #[test]
    fn patch_size_one_passes_reference_through() {
        let low = random_image(3, 3, 3, 12);
        let spec = superres_spec(&low, 1, default_timepoints()).unwrap();
        assert!(spec.mask.iter().all(|&m| m == 0.0));
        let out = edit(&flow(27), &spec, &mut seeded_rng(13)).unwrap();
        assert_eq!(out.image, low);
    }

    #[test]
    fn sdedit_defaults_and_determinism() {
        let strokes = random_image(2, 2, 3, 14);
        let spec = sdedit_spec(strokes.clone(), None);
        assert_eq!(spec.timepoints, vec![5.38, 2.24]);
        let f = flow(12);
        let a = edit(&f, &spec, &mut seeded_rng(15)).unwrap();
        let b = edit(&f, &spec, &mut seeded_rng(15)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, strokes);
    }

    #[test]
    fn editing_grid_endpoints() {
        let t = editing_grid(EPSILON, HORIZON, RHO, 40).unwrap();
        assert_eq!(t[0], HORIZON);
        assert_eq!(t[39], EPSILON);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        let a = HORIZON.powf(1.0 / 7.0);
        let b = EPSILON.powf(1.0 / 7.0);
        assert!((t[1] - (a + (b - a) / 39.0).powi(7)).abs() < 1e-12);
    }

    #[test]
    fn denoise_gaussian_closed_form() {
        let (m, s2) = (0.3, 0.25);
        let f = GaussianFlow::new(&[m], s2, EPSILON, HORIZON);
        let z = 0.8;
        let mut prev = f64::INFINITY;
        for sigma in [EPSILON, 0.5, 2.0, 10.0] {
            let x = Batch::from_rows(1, &[[m + sigma * z]]).unwrap();
            let out = denoise(&f, &x, sigma).unwrap();
            let want = m + ((s2 + EPSILON * EPSILON) / (s2 + sigma * sigma)).sqrt() * sigma * z;
            assert!((out.as_slice()[0] - want).abs() < 1e-12);
            if sigma == EPSILON {
                assert_eq!(out.as_slice()[0], x.as_slice()[0]);
            }
            let ratio = (out.as_slice()[0] - m) / (sigma * z);
            assert!(ratio < prev);
            prev = ratio;
        }
        assert!(denoise(&f, &Batch::zeros(1, 1), 100.0).is_err());
    }

    #[test]
    fn slerp_cases() {
        let (z1, z2) = ([1.0, 0.0], [0.0, 1.0]);
        let mid = slerp(&z1, &z2, 0.5).unwrap();
        let r = 0.5f64.sqrt();
        assert!((mid[0] - r).abs() < 1e-15 && (mid[1] - r).abs() < 1e-15);
        assert!(slerp(&z1, &[-1.0, 0.0], 0.5).is_err());
        assert!(slerp(&z1, &[0.0, 0.0], 0.5).is_err());
        let f = flow(2);
        let mut want = [0.0; 2];
        f.apply(&z1, HORIZON, &mut want);
        assert_eq!(interpolate(&f, &z1, &z2, 0.0).unwrap(), want.to_vec());
        // norm continuity along a dense sweep
        let a = [3.0, -1.0, 2.0];
        let b = [-1.0, 2.5, 0.5];
        let mut prev = math::norm(&a);
        for i in 1..=1000 {
            let z = slerp(&a, &b, i as f64 / 1000.0).unwrap();
            let n = math::norm(&z);
            assert!((n - prev).abs() < 0.01);
            prev = n;
        }
    }

    #[test]
    fn enforcement_hits_random_targets() {
        let t = LinearTransform::colorization();
        let mut rng = seeded_rng(16);
        let mut misses = 0;
        for _ in 0..2000 {
            let v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let want: f64 = rng.sample(StandardNormal);
            let mut img = Image::new(1, 1, 3, v).unwrap();
            let target = Image::new(1, 1, 3, vec![want, 0.0, 0.0]).unwrap();
            misses += enforce_constraints(&t, &mut img, &target, &[0.0, 1.0, 1.0]);
            assert_eq!(t.apply(&img).unwrap().as_slice()[0], want);
        }
        assert_eq!(misses, 0);
    }
}

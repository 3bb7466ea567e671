//! Closed-form references used to check the numerical machinery.
//!
//! Nothing here shares code with the solvers or the networks: the Gaussian
//! flow is written out by hand and the reference integrator is a classical
//! fourth-order Runge-Kutta scheme in `ln t`.

use alloc::vec;
use alloc::vec::Vec;

use crate::consistency::ConsistencyFn;
use crate::diffusion::ScoreFn;
use crate::math;

/// Probability-flow ODE of `p_data = N(mean, variance I)`.
///
/// Every trajectory is affine in time-dependent scale:
/// `x(t) = m + (x(s) - m) * sqrt((sigma^2 + t^2) / (sigma^2 + s^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFlow {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub epsilon: f64,
    pub horizon: f64,
}

impl GaussianFlow {
    pub fn new(mean: &[f64], variance: f64, epsilon: f64, horizon: f64) -> Self {
        Self { mean: mean.to_vec(), variance, epsilon, horizon }
    }

    /// Scale factor that carries a state at time `from` to time `to`.
    pub fn ratio(&self, from: f64, to: f64) -> f64 {
        math::sqrt((self.variance + to * to) / (self.variance + from * from))
    }

    /// Exact solution of the ODE started at `(x, from)` and evaluated at `to`.
    pub fn solve(&self, x: &[f64], from: f64, to: f64, out: &mut [f64]) {
        let r = self.ratio(from, to);
        for ((o, xi), m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = m + (xi - m) * r;
        }
    }

    pub fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let v = self.variance + t * t;
        for ((o, xi), m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = -(xi - m) / v;
        }
    }
}

impl ScoreFn for GaussianFlow {
    fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        GaussianFlow::score(self, x, t, out)
    }
}

impl ConsistencyFn for GaussianFlow {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn apply(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.solve(x, t, self.epsilon, out);
    }

    fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64, out: &mut [f64], tangent: &mut [f64]) {
        let r = self.ratio(t, self.epsilon);
        // d r / d t = -t r / (sigma^2 + t^2)
        let dr = -t * r / (self.variance + t * t);
        for i in 0..self.mean.len() {
            let c = x[i] - self.mean[i];
            out[i] = self.mean[i] + c * r;
            tangent[i] = r * vx[i] + c * dr * vt;
        }
    }
}

/// Integrates `dx/dt = -t s(x, t)` from `from` to `to` with RK4 on a uniform
/// grid in `u = ln t`, where the ODE reads `dx/du = -t^2 s(x, t)`.
pub fn rk4_flow<S: ScoreFn + ?Sized>(score: &S, x: &[f64], from: f64, to: f64, steps: usize, out: &mut [f64]) {
    let d = x.len();
    let (u0, u1) = (math::ln(from), math::ln(to));
    let h = (u1 - u0) / steps as f64;
    let mut y = x.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let drift = |y: &[f64], u: f64, out: &mut [f64]| {
        let t = math::exp(u);
        score.score(y, t, out);
        out.iter_mut().for_each(|v| *v *= -t * t);
    };
    for s in 0..steps {
        let u = u0 + s as f64 * h;
        drift(&y, u, &mut k1);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        drift(&tmp, u + 0.5 * h, &mut k2);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        drift(&tmp, u + 0.5 * h, &mut k3);
        for i in 0..d {
            tmp[i] = y[i] + h * k3[i];
        }
        drift(&tmp, u + h, &mut k4);
        for i in 0..d {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    out.copy_from_slice(&y);
}

/// Consistency function of an arbitrary score, evaluated by fine RK4
/// integration down to `epsilon`. JVPs use central differences and are only
/// meant for coarse checks.
#[derive(Debug, Clone)]
pub struct IntegratedConsistency<S> {
    pub score: S,
    pub dim: usize,
    pub epsilon: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl<S: ScoreFn> ConsistencyFn for IntegratedConsistency<S> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn apply(&self, x: &[f64], t: f64, out: &mut [f64]) {
        if t == self.epsilon {
            out.copy_from_slice(x);
            return;
        }
        rk4_flow(&self.score, x, t, self.epsilon, self.steps, out);
    }

    fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64, out: &mut [f64], tangent: &mut [f64]) {
        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(vx).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(vx).map(|(a, b)| a - h * b).collect();
        let mut fp = vec![0.0; self.dim];
        let mut fm = vec![0.0; self.dim];
        self.apply(&xp, t + h * vt, &mut fp);
        self.apply(&xm, t - h * vt, &mut fm);
        self.apply(x, t, out);
        for i in 0..self.dim {
            tangent[i] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

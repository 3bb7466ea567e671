//! A small MLP backbone `F(x, t)` with reverse-mode parameter gradients and
//! forward-mode Jacobian-vector products over the joint input `(x, t)`.
//!
//! The network sees `[c_in(t) * x, phi(ln t / 4)]`, where `phi` is a bank of
//! sinusoidal features and `c_in` an optional variance-normalizing input
//! scale, followed by affine layers with a smooth activation. The output has
//! the same dimension as `x`.
//!
//! Gradients are hand-derived. A [`Tape`] records the primal (and, for JVPs,
//! tangent) values of one sample so that a single backward sweep can be run
//! against it. Backpropagating through a JVP uses the second derivative of the
//! activation, which is why only `C^2` activations are offered.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use rand_distr::StandardNormal;

use crate::batch::Batch;
use crate::error::{input_err, numeric_err, Result};
use crate::math;

/// Name and shape of one parameter tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamShape {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter storage with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<ParamShape>) -> Result<Self> {
        let expected: usize = layout.iter().map(ParamShape::numel).sum();
        if expected != values.len() {
            return Err(input_err!(
                "layout describes {expected} parameters but {} values were given",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(numeric_err!("parameter {i} is not finite"));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self { values: vec![0.0; other.values.len()], layout: other.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamShape] {
        &self.layout
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Offset and length of the named tensor.
    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for p in &self.layout {
            if p.name == name {
                return Some((off, p.numel()));
            }
            off += p.numel();
        }
        None
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Smooth nonlinearities. Both are `C^infinity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `z * sigmoid(z)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(input_err!("unknown activation {other:?}")),
        }
    }

    /// Value, first and second derivative at `z`.
    #[inline]
    fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let s = math::sigmoid(z);
                let v = z * s;
                let d1 = s * (1.0 + z * (1.0 - s));
                let d2 = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
                (v, d1, d2)
            }
            Activation::Tanh => {
                let v = math::tanh(z);
                let d1 = 1.0 - v * v;
                (v, d1, -2.0 * v * d1)
            }
        }
    }

    #[inline]
    fn eval2(self, z: f64) -> (f64, f64) {
        let (v, d1, _) = self.eval3(z);
        (v, d1)
    }
}

/// How `x` is scaled before entering the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InputScaling {
    #[default]
    None,
    /// `c_in(t) = 1 / sqrt(sigma_data^2 + t^2)`
    Variance { sigma_data: f64 },
}

impl InputScaling {
    #[inline]
    fn coeff(self, t: f64) -> (f64, f64) {
        match self {
            InputScaling::None => (1.0, 0.0),
            InputScaling::Variance { sigma_data } => {
                let v = sigma_data * sigma_data + t * t;
                let c = 1.0 / math::sqrt(v);
                (c, -t * c / v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features; must be even.
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub input_scaling: InputScaling,
}

impl BackboneConfig {
    /// Three hidden layers of 128 units, 16 time features, SiLU.
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
            activation: Activation::Silu,
            input_scaling: InputScaling::Variance { sigma_data: 1.0 },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(input_err!("input_dim must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(input_err!(
                "time_embed_dim must be a positive even integer, got {}",
                self.time_embed_dim
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(input_err!("hidden widths must be positive"));
        }
        if let InputScaling::Variance { sigma_data } = self.input_scaling {
            if !(sigma_data > 0.0) {
                return Err(input_err!("input scaling sigma_data must be positive"));
            }
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim + self.time_embed_dim;
        for &w in &self.hidden {
            dims.push((w, fan_in));
            fan_in = w;
        }
        dims.push((self.input_dim, fan_in));
        dims
    }

    pub fn layout(&self) -> Vec<ParamShape> {
        let mut layout = Vec::new();
        for (i, (rows, cols)) in self.layer_dims().into_iter().enumerate() {
            layout.push(ParamShape { name: format!("layer{i}.weight"), shape: vec![rows, cols] });
            layout.push(ParamShape { name: format!("layer{i}.bias"), shape: vec![rows] });
        }
        layout
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSpan {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

/// The free-form network `F_theta(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    freqs: Vec<f64>,
    spans: Vec<LayerSpan>,
    params: ParamVector,
}

impl Backbone {
    /// Fan-in scaled Gaussian weights, zero biases, zero final layer.
    pub fn init<R: rand::Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let mut values = Vec::new();
        for (i, &(rows, cols)) in dims.iter().enumerate() {
            let scale = 1.0 / math::sqrt(cols as f64);
            for _ in 0..rows * cols {
                let w = if i == last { 0.0 } else { scale * rng.sample::<f64, _>(StandardNormal) };
                values.push(w);
            }
            values.extend(core::iter::repeat(0.0).take(rows));
        }
        let params = ParamVector::new(values, config.layout())?;
        Self::from_params(config, params)
    }

    /// Like [`Backbone::init`] but the final layer is drawn too, so the
    /// output is a generic nonzero function. Used by gradient checks and
    /// theory checks that need an arbitrary fixed network.
    pub fn random<R: rand::Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::init(config, rng)?;
        let span = *net.spans.last().expect("at least one layer");
        let scale = 1.0 / math::sqrt(span.cols as f64);
        let values = net.params.values_mut();
        for v in &mut values[span.w..span.w + span.rows * span.cols] {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut values[span.b..span.b + span.rows] {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(net)
    }

    pub fn from_params(config: BackboneConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        if params.layout() != config.layout().as_slice() {
            return Err(input_err!("parameter layout does not match backbone configuration"));
        }
        let mut spans = Vec::new();
        let mut off = 0;
        for (rows, cols) in config.layer_dims() {
            spans.push(LayerSpan { w: off, b: off + rows * cols, rows, cols });
            off += rows * cols + rows;
        }
        let half = config.time_embed_dim / 2;
        let freqs = (0..half)
            .map(|k| if half == 1 { 1.0 } else { math::powf(16.0, k as f64 / (half - 1) as f64) })
            .collect();
        Ok(Self { config, freqs, spans, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameter values, keeping the layout.
    pub fn set_values(&mut self, values: &[f64]) {
        self.params.values_mut().copy_from_slice(values);
    }

    fn input_width(&self) -> usize {
        self.config.input_dim + self.config.time_embed_dim
    }

    fn check_point(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(input_err!("expected a {}-d input, got {}", self.dim(), x.len()));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(input_err!("time must be positive and finite, got {t}"));
        }
        Ok(())
    }

    /// Writes the network input (and its tangent when `tangent` is given).
    fn embed(&self, x: &[f64], t: f64, u: &mut [f64], tangent: Option<(&[f64], f64, &mut [f64])>) {
        let d = self.dim();
        let (cin, dcin) = self.config.input_scaling.coeff(t);
        for i in 0..d {
            u[i] = cin * x[i];
        }
        let c = math::ln(t) / 4.0;
        for (k, &w) in self.freqs.iter().enumerate() {
            u[d + 2 * k] = math::sin(w * c);
            u[d + 2 * k + 1] = math::cos(w * c);
        }
        if let Some((vx, vt, du)) = tangent {
            for i in 0..d {
                du[i] = dcin * vt * x[i] + cin * vx[i];
            }
            let dc = vt / (4.0 * t);
            for (k, &w) in self.freqs.iter().enumerate() {
                du[d + 2 * k] = w * math::cos(w * c) * dc;
                du[d + 2 * k + 1] = -w * math::sin(w * c) * dc;
            }
        }
    }

    #[inline]
    fn affine(&self, span: LayerSpan, input: &[f64], out: &mut [f64]) {
        let p = self.params.values();
        let w = &p[span.w..span.w + span.rows * span.cols];
        let b = &p[span.b..span.b + span.rows];
        for r in 0..span.rows {
            out[r] = b[r] + math::dot(&w[r * span.cols..(r + 1) * span.cols], input);
        }
    }

    #[inline]
    fn linear(&self, span: LayerSpan, input: &[f64], out: &mut [f64]) {
        let w = &self.params.values()[span.w..span.w + span.rows * span.cols];
        for r in 0..span.rows {
            out[r] = math::dot(&w[r * span.cols..(r + 1) * span.cols], input);
        }
    }

    /// `W^T g`, written into `out`.
    #[inline]
    fn transpose_mul(&self, span: LayerSpan, g: &[f64], out: &mut [f64]) {
        let w = &self.params.values()[span.w..span.w + span.rows * span.cols];
        out[..span.cols].iter_mut().for_each(|v| *v = 0.0);
        for r in 0..span.rows {
            let gr = g[r];
            if gr == 0.0 {
                continue;
            }
            let row = &w[r * span.cols..(r + 1) * span.cols];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += gr * wv;
            }
        }
    }

    /// Forward pass for a single point, recording the tape.
    pub fn forward_taped(&self, x: &[f64], t: f64, tape: &mut Tape, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        tape.ensure(self);
        tape.has_tangent = false;
        self.embed(x, t, &mut tape.input, None);
        let act = self.config.activation;
        let nh = self.spans.len() - 1;
        for l in 0..nh {
            let span = self.spans[l];
            let (before, after) = tape.act.split_at_mut(l);
            let input: &[f64] = if l == 0 { &tape.input } else { &before[l - 1] };
            self.affine(span, input, &mut tape.pre[l]);
            for (a, &z) in after[0].iter_mut().zip(&tape.pre[l]) {
                *a = act.eval2(z).0;
            }
        }
        let last = self.spans[nh];
        let input: &[f64] = if nh == 0 { &tape.input } else { &tape.act[nh - 1] };
        self.affine(last, input, out);
    }

    /// Accumulates `d<grad_out, F>/dtheta` into `grad` using the tape of the
    /// last [`Backbone::forward_taped`] call.
    pub fn backward(&self, tape: &mut Tape, grad_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.num_params());
        let act = self.config.activation;
        let nh = self.spans.len() - 1;
        let mut g = core::mem::take(&mut tape.g);
        let mut g_next = core::mem::take(&mut tape.g_next);
        g.clear();
        g.extend_from_slice(grad_out);
        for l in (0..=nh).rev() {
            let span = self.spans[l];
            let input: &[f64] = if l == 0 { &tape.input } else { &tape.act[l - 1] };
            for r in 0..span.rows {
                let gr = g[r];
                grad[span.b + r] += gr;
                if gr != 0.0 {
                    let row = &mut grad[span.w + r * span.cols..span.w + (r + 1) * span.cols];
                    for (o, a) in row.iter_mut().zip(input) {
                        *o += gr * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            g_next.resize(span.cols, 0.0);
            self.transpose_mul(span, &g, &mut g_next);
            // through the activation of layer l-1
            for (gv, &z) in g_next.iter_mut().zip(&tape.pre[l - 1]) {
                *gv *= act.eval2(z).1;
            }
            core::mem::swap(&mut g, &mut g_next);
        }
        tape.g = g;
        tape.g_next = g_next;
    }

    /// Value and directional derivative `dF/dx . v_x + dF/dt . v_t` for one
    /// point, recording primal and tangent values on the tape.
    pub fn jvp_taped(
        &self,
        x: &[f64],
        t: f64,
        vx: &[f64],
        vt: f64,
        tape: &mut Tape,
        out: &mut [f64],
        tan_out: &mut [f64],
    ) {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(vx.len(), self.dim());
        tape.ensure(self);
        tape.has_tangent = true;
        self.embed(x, t, &mut tape.input, Some((vx, vt, &mut tape.d_input)));
        let act = self.config.activation;
        let nh = self.spans.len() - 1;
        for l in 0..nh {
            let span = self.spans[l];
            {
                let (a_before, _) = tape.act.split_at_mut(l);
                let (da_before, _) = tape.d_act.split_at_mut(l);
                let input: &[f64] = if l == 0 { &tape.input } else { &a_before[l - 1] };
                let d_input: &[f64] = if l == 0 { &tape.d_input } else { &da_before[l - 1] };
                self.affine(span, input, &mut tape.pre[l]);
                self.linear(span, d_input, &mut tape.d_pre[l]);
            }
            for r in 0..span.rows {
                let (v, d1) = act.eval2(tape.pre[l][r]);
                tape.act[l][r] = v;
                tape.d_act[l][r] = d1 * tape.d_pre[l][r];
            }
        }
        let last = self.spans[nh];
        let (input, d_input): (&[f64], &[f64]) = if nh == 0 {
            (&tape.input, &tape.d_input)
        } else {
            (&tape.act[nh - 1], &tape.d_act[nh - 1])
        };
        self.affine(last, input, out);
        self.linear(last, d_input, tan_out);
    }

    /// Accumulates the parameter gradient of `<g_out, F> + <g_tan, JVP>`
    /// using the tape of the last [`Backbone::jvp_taped`] call.
    pub fn jvp_backward(&self, tape: &mut Tape, g_out: &[f64], g_tan: &[f64], grad: &mut [f64]) {
        assert!(tape.has_tangent, "jvp_backward needs a tape recorded by jvp_taped");
        let act = self.config.activation;
        let nh = self.spans.len() - 1;
        let mut g = core::mem::take(&mut tape.g);
        let mut gd = core::mem::take(&mut tape.gd);
        let mut g_next = core::mem::take(&mut tape.g_next);
        let mut gd_next = core::mem::take(&mut tape.gd_next);
        g.clear();
        g.extend_from_slice(g_out);
        gd.clear();
        gd.extend_from_slice(g_tan);
        for l in (0..=nh).rev() {
            let span = self.spans[l];
            let (input, d_input): (&[f64], &[f64]) = if l == 0 {
                (&tape.input, &tape.d_input)
            } else {
                (&tape.act[l - 1], &tape.d_act[l - 1])
            };
            for r in 0..span.rows {
                let (gr, gdr) = (g[r], gd[r]);
                grad[span.b + r] += gr;
                let row = &mut grad[span.w + r * span.cols..span.w + (r + 1) * span.cols];
                for ((o, a), da) in row.iter_mut().zip(input).zip(d_input) {
                    *o += gr * a + gdr * da;
                }
            }
            if l == 0 {
                break;
            }
            g_next.resize(span.cols, 0.0);
            gd_next.resize(span.cols, 0.0);
            self.transpose_mul(span, &g, &mut g_next);
            self.transpose_mul(span, &gd, &mut gd_next);
            // a = act(z), a' = act'(z) z'
            for r in 0..span.cols {
                let z = tape.pre[l - 1][r];
                let dz = tape.d_pre[l - 1][r];
                let (_, d1, d2) = act.eval3(z);
                let ga = g_next[r];
                let gda = gd_next[r];
                g_next[r] = ga * d1 + gda * d2 * dz;
                gd_next[r] = gda * d1;
            }
            core::mem::swap(&mut g, &mut g_next);
            core::mem::swap(&mut gd, &mut gd_next);
        }
        tape.g = g;
        tape.gd = gd;
        tape.g_next = g_next;
        tape.gd_next = gd_next;
    }

    /// Single-point forward pass without keeping a tape.
    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        let act = self.config.activation;
        let mut cur = vec![0.0; self.input_width()];
        self.embed(x, t, &mut cur, None);
        let nh = self.spans.len() - 1;
        let mut next = Vec::new();
        for l in 0..nh {
            let span = self.spans[l];
            next.resize(span.rows, 0.0);
            self.affine(span, &cur, &mut next);
            for v in next.iter_mut() {
                *v = act.eval2(*v).0;
            }
            core::mem::swap(&mut cur, &mut next);
        }
        self.affine(self.spans[nh], &cur, out);
    }

    /// Batched forward pass.
    pub fn forward(&self, x: &Batch, t: &[f64]) -> Result<Batch> {
        self.check_batch(x, t)?;
        let mut out = Batch::zeros(self.dim(), x.len());
        let mut tape = Tape::new(self);
        for (i, &ti) in t.iter().enumerate() {
            self.forward_taped(x.row(i), ti, &mut tape, out.row_mut(i));
        }
        Ok(out)
    }

    /// Batched JVP: row `i` is `dF/dx(x_i, t_i) v_x[i] + dF/dt(x_i, t_i) v_t[i]`.
    pub fn jvp_xt(&self, x: &Batch, t: &[f64], vx: &Batch, vt: &[f64]) -> Result<Batch> {
        self.check_batch(x, t)?;
        if vx.dim() != x.dim() || vx.len() != x.len() || vt.len() != x.len() {
            return Err(input_err!("tangent shapes do not match the inputs"));
        }
        let mut out = alloc::vec![0.0; self.dim()];
        let mut tan = Batch::zeros(self.dim(), x.len());
        let mut tape = Tape::new(self);
        for i in 0..x.len() {
            self.jvp_taped(x.row(i), t[i], vx.row(i), vt[i], &mut tape, &mut out, tan.row_mut(i));
        }
        Ok(tan)
    }

    /// Reverse-mode gradient of a scalar loss of the batched output.
    ///
    /// `loss` receives the network output and returns the loss value together
    /// with its gradient with respect to that output.
    pub fn grad_params<L>(&self, x: &Batch, t: &[f64], loss: L) -> Result<(f64, ParamVector)>
    where
        L: FnOnce(&Batch) -> (f64, Batch),
    {
        self.check_batch(x, t)?;
        let out = self.forward(x, t)?;
        let (value, g_out) = loss(&out);
        if !value.is_finite() {
            return Err(numeric_err!("loss is not finite ({value})"));
        }
        if g_out.dim() != out.dim() || g_out.len() != out.len() {
            return Err(input_err!("loss gradient shape does not match the output"));
        }
        let mut grad = ParamVector::zeros_like(&self.params);
        let mut tape = Tape::new(self);
        let mut scratch = alloc::vec![0.0; self.dim()];
        for i in 0..x.len() {
            self.forward_taped(x.row(i), t[i], &mut tape, &mut scratch);
            self.backward(&mut tape, g_out.row(i), grad.values_mut());
        }
        Ok((value, grad))
    }

    fn check_batch(&self, x: &Batch, t: &[f64]) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(input_err!("expected {}-d points, got {}-d", self.dim(), x.dim()));
        }
        if t.len() != x.len() {
            return Err(input_err!("{} times for {} points", t.len(), x.len()));
        }
        if !x.is_finite() {
            return Err(input_err!("inputs must be finite"));
        }
        for (i, &ti) in t.iter().enumerate() {
            self.check_point(x.row(i), ti)?;
        }
        Ok(())
    }

    /// One-line summary, e.g. `2-[128x3]-2 silu, 16 time features`.
    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.config.hidden.iter().map(|w| w.to_string()).collect();
        format!(
            "{}-[{}]-{} {}, {} time features",
            self.dim(),
            widths.join(","),
            self.dim(),
            self.config.activation.name(),
            self.config.time_embed_dim
        )
    }
}

/// Recorded primal (and optionally tangent) values of one forward pass.
///
/// One forward produces exactly one consistent backward: recording again
/// overwrites the previous sample.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    input: Vec<f64>,
    d_input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    d_pre: Vec<Vec<f64>>,
    d_act: Vec<Vec<f64>>,
    has_tangent: bool,
    g: Vec<f64>,
    gd: Vec<f64>,
    g_next: Vec<f64>,
    gd_next: Vec<f64>,
}

impl Tape {
    pub fn new(net: &Backbone) -> Self {
        let mut tape = Self::default();
        tape.ensure(net);
        tape
    }

    fn ensure(&mut self, net: &Backbone) {
        let width = net.input_width();
        if self.input.len() != width {
            self.input = vec![0.0; width];
            self.d_input = vec![0.0; width];
        }
        let hidden = &net.config.hidden;
        if self.pre.len() != hidden.len() || self.pre.iter().zip(hidden).any(|(v, &w)| v.len() != w) {
            self.pre = hidden.iter().map(|&w| vec![0.0; w]).collect();
            self.act = self.pre.clone();
            self.d_pre = self.pre.clone();
            self.d_act = self.pre.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            input_dim: 3,
            hidden: vec![7, 5],
            time_embed_dim: 4,
            activation: Activation::Silu,
            input_scaling: InputScaling::Variance { sigma_data: 0.5 },
        }
    }

    fn affine_config() -> BackboneConfig {
        BackboneConfig {
            input_dim: 2,
            hidden: vec![],
            time_embed_dim: 2,
            activation: Activation::Silu,
            input_scaling: InputScaling::None,
        }
    }

    /// Straight-line evaluation written independently of the tape machinery.
    fn reference_forward(net: &Backbone, x: &[f64], t: f64) -> Vec<f64> {
        let cfg = net.config();
        let p = net.params().values();
        let cin = match cfg.input_scaling {
            InputScaling::None => 1.0,
            InputScaling::Variance { sigma_data } => 1.0 / (sigma_data * sigma_data + t * t).sqrt(),
        };
        let half = cfg.time_embed_dim / 2;
        let c = t.ln() / 4.0;
        let mut h: Vec<f64> = x.iter().map(|v| cin * v).collect();
        for k in 0..half {
            let w = if half == 1 { 1.0 } else { 16f64.powf(k as f64 / (half - 1) as f64) };
            h.push((w * c).sin());
            h.push((w * c).cos());
        }
        let mut widths = cfg.hidden.clone();
        widths.push(cfg.input_dim);
        let mut off = 0;
        for (li, &rows) in widths.iter().enumerate() {
            let cols = h.len();
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = 0.0;
                for cidx in 0..cols {
                    acc += p[off + r * cols + cidx] * h[cidx];
                }
                next[r] = acc + p[off + rows * cols + r];
            }
            off += rows * cols + rows;
            if li + 1 < widths.len() {
                for v in next.iter_mut() {
                    *v = *v / (1.0 + (-*v).exp());
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = seeded_rng(1);
        let mut net = Backbone::init(small_config(), &mut rng).unwrap();
        net.params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Batch::from_rows(3, &[[1.0, -2.0, 3.0], [0.5, 0.0, -7.0]]).unwrap();
        let out = net.forward(&x, &[0.1, 40.0]).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_initialized_affine_net_is_identity() {
        let mut rng = seeded_rng(2);
        let mut net = Backbone::init(affine_config(), &mut rng).unwrap();
        let (off, _) = net.params().span("layer0.weight").unwrap();
        let v = net.params_mut().values_mut();
        // weight is 2 x 4: [I | 0]
        v[off] = 1.0;
        v[off + 4 + 1] = 1.0;
        let x = Batch::from_rows(2, &[[0.25, -3.5]]).unwrap();
        let out = net.forward(&x, &[2.0]).unwrap();
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn fresh_init_has_zero_output_layer() {
        let mut rng = seeded_rng(3);
        let net = Backbone::init(small_config(), &mut rng).unwrap();
        let x = Batch::from_rows(3, &[[1.0, 2.0, 3.0]]).unwrap();
        assert!(net.forward(&x, &[1.0]).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut rng = seeded_rng(4);
        let net = Backbone::random(small_config(), &mut rng).unwrap();
        let x = [0.3, -1.2, 2.5];
        let got = net.forward(&Batch::from_rows(3, &[x]).unwrap(), &[0.7]).unwrap();
        let want = reference_forward(&net, &x, 0.7);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-13 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn forward_is_bit_stable() {
        let mut rng = seeded_rng(5);
        let net = Backbone::random(small_config(), &mut rng).unwrap();
        let x = Batch::standard_normal(3, 16, &mut rng);
        let t: Vec<f64> = (0..16).map(|i| 0.002 + i as f64).collect();
        let a = net.forward(&x, &t).unwrap();
        let b = net.forward(&x, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let mut rng = seeded_rng(6);
        let net = Backbone::init(small_config(), &mut rng).unwrap();
        let x = Batch::zeros(2, 1);
        assert!(matches!(net.forward(&x, &[1.0]), Err(crate::Error::Input(_))));
        let x = Batch::zeros(3, 2);
        assert!(matches!(net.forward(&x, &[1.0]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn zero_weight_gradient_of_squared_output() {
        let mut rng = seeded_rng(7);
        let mut net = Backbone::init(small_config(), &mut rng).unwrap();
        net.params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Batch::from_rows(3, &[[1.0, 2.0, 3.0]]).unwrap();
        let (loss, grad) = net
            .grad_params(&x, &[1.0], |out| {
                let mut g = out.clone();
                g.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
                (math::norm_sq(out.as_slice()), g)
            })
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = seeded_rng(8);
        let net = Backbone::random(small_config(), &mut rng).unwrap();
        let x = Batch::standard_normal(3, 4, &mut rng);
        let t = [0.01, 0.5, 3.0, 60.0];
        let sq = |scale: f64| {
            move |out: &Batch| {
                let mut g = out.clone();
                g.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0 * scale);
                (scale * math::norm_sq(out.as_slice()), g)
            }
        };
        let (_, g1) = net.grad_params(&x, &t, sq(1.0)).unwrap();
        let (_, g2) = net.grad_params(&x, &t, sq(2.0)).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut rng = seeded_rng(9);
        let net = Backbone::random(small_config(), &mut rng).unwrap();
        let x = Batch::standard_normal(3, 1, &mut rng);
        let r = net.grad_params(&x, &[1.0], |out| (f64::NAN, out.clone()));
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn zero_tangent_gives_zero_jvp() {
        let mut rng = seeded_rng(10);
        let net = Backbone::random(small_config(), &mut rng).unwrap();
        let x = Batch::standard_normal(3, 2, &mut rng);
        let tan = net.jvp_xt(&x, &[0.3, 9.0], &Batch::zeros(3, 2), &[0.0, 0.0]).unwrap();
        assert!(tan.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_net_jvp_is_weight_times_tangent() {
        let mut rng = seeded_rng(11);
        let net = Backbone::random(affine_config(), &mut rng).unwrap();
        let x = Batch::from_rows(2, &[[0.4, -0.9]]).unwrap();
        let v = Batch::from_rows(2, &[[1.5, 2.0]]).unwrap();
        let tan = net.jvp_xt(&x, &[3.0], &v, &[0.0]).unwrap();
        let (off, _) = net.params().span("layer0.weight").unwrap();
        let w = &net.params().values()[off..];
        let want = [w[0] * 1.5 + w[1] * 2.0, w[4] * 1.5 + w[5] * 2.0];
        assert_eq!(tan.as_slice(), &want);
    }

    #[test]
    fn tanh_activation_derivatives() {
        for z in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let (v, d1, d2) = Activation::Tanh.eval3(z);
            let h = 1e-5;
            let (vp, d1p, _) = Activation::Tanh.eval3(z + h);
            let (vm, d1m, _) = Activation::Tanh.eval3(z - h);
            assert!((v - libm::tanh(z)).abs() < 1e-15);
            assert!((d1 - (vp - vm) / (2.0 * h)).abs() < 1e-8);
            assert!((d2 - (d1p - d1m) / (2.0 * h)).abs() < 1e-8);
        }
    }
}

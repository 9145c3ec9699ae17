//! Time-conditioned MLP vector field with hand-written first and second order
//! derivatives.
//!
//! Architecture: the input `(x, t)` feeds `hidden_layers` ELU layers of width
//! `hidden_width`, followed by a linear output layer of size `input_dim`. The
//! time `t` is appended as an extra input to every layer, including the output
//! layer.
//!
//! Parameter layout, layer by layer from input to output: the weight matrix
//! stored input-major (`w[i * n_out + o]` connects input `i` to output `o`,
//! and the last input row belongs to `t`), followed by the bias vector. For the
//! default 3 x 32 network on 2D data this gives
//! `(3*32 + 32) + 2 * (33*32 + 32) + (33*2 + 2) = 2372` parameters.

use std::ops::{Deref, DerefMut};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// ELU with alpha = 1.
    Elu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub input_dim: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_width: 32,
            input_dim: 2,
            activation: Activation::Elu,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::config("hidden_layers must be at least 1"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Number of parameters of the documented layout.
pub fn param_count(cfg: &NetConfig) -> usize {
    let d = cfg.input_dim;
    let w = cfg.hidden_width;
    let first = (d + 1) * w + w;
    let middle = (cfg.hidden_layers - 1) * ((w + 1) * w + w);
    let output = (w + 1) * d + d;
    first + middle + output
}

/// Flat vector of network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    hidden: bool,
}

/// Evaluator for a fixed architecture. Holds only the layout; parameters are
/// passed in on every call.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: NetConfig,
    layers: Vec<Layer>,
    n_params: usize,
}

/// Per-thread buffers for the hot paths. Reuse one per worker to keep the
/// integrators allocation free.
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    ta: Vec<Vec<f64>>,
    tz: Vec<Vec<f64>>,
    n_dirs: usize,
    hbar: Vec<f64>,
    thbar: Vec<f64>,
    zbar: Vec<f64>,
    tzbar: Vec<f64>,
}

#[inline]
fn elu(z: f64) -> (f64, f64) {
    if z > 0.0 {
        (z, 1.0)
    } else {
        let e = z.exp();
        (z.exp_m1(), e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yo, xo) in y.iter_mut().zip(x) {
        *yo += alpha * xo;
    }
}

impl Mlp {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut offset = 0;
        let mut prev = cfg.input_dim;
        for l in 0..=cfg.hidden_layers {
            let hidden = l < cfg.hidden_layers;
            let n_in = prev + 1;
            let n_out = if hidden { cfg.hidden_width } else { cfg.input_dim };
            let w = offset;
            let b = w + n_in * n_out;
            offset = b + n_out;
            layers.push(Layer {
                n_in,
                n_out,
                w,
                b,
                hidden,
            });
            prev = n_out;
        }
        debug_assert_eq!(offset, param_count(cfg));
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            n_params: offset,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }

    /// Offsets `(weights, biases)` and shape `(n_in, n_out)` of layer `l`.
    pub fn layer_span(&self, l: usize) -> ((usize, usize), (usize, usize)) {
        let layer = &self.layers[l];
        ((layer.w, layer.b), (layer.n_in, layer.n_out))
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, Stream::Init);
        let mut theta = ParamVector::zeros(self.n_params);
        for layer in &self.layers {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut theta[layer.w..layer.b] {
                *w = rng.random_range(-limit..limit);
            }
        }
        theta
    }

    pub fn scratch(&self) -> Scratch {
        let d = self.cfg.input_dim;
        let max_in = self.layers.iter().map(|l| l.n_in).max().unwrap_or(0);
        let max_out = self.layers.iter().map(|l| l.n_out).max().unwrap_or(0);
        Scratch {
            a: self.layers.iter().map(|l| vec![0.0; l.n_in]).collect(),
            z: self.layers.iter().map(|l| vec![0.0; l.n_out]).collect(),
            d1: self.layers.iter().map(|l| vec![0.0; l.n_out]).collect(),
            ta: self.layers.iter().map(|l| vec![0.0; d * l.n_in]).collect(),
            tz: self.layers.iter().map(|l| vec![0.0; d * l.n_out]).collect(),
            n_dirs: 0,
            hbar: vec![0.0; max_in],
            thbar: vec![0.0; d * max_in],
            zbar: vec![0.0; max_out],
            tzbar: vec![0.0; d * max_out],
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(Error::Shape {
                expected: self.n_params,
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::Shape {
                expected: self.cfg.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass, optionally carrying `n_dirs` input tangents (row-major,
    /// `dirs[k * d + i]`). Results stay in `s`; read them with [`Scratch::output`]
    /// and [`Scratch::tangent`]. Does not check finiteness.
    pub fn eval_into(&self, theta: &[f64], x: &[f64], t: f64, dirs: &[f64], s: &mut Scratch) {
        let d = self.cfg.input_dim;
        let n_dirs = dirs.len() / d;
        s.n_dirs = n_dirs;
        s.a[0][..d].copy_from_slice(x);
        s.a[0][d] = t;
        for k in 0..n_dirs {
            let n_in = self.layers[0].n_in;
            let row = &mut s.ta[0][k * n_in..(k + 1) * n_in];
            row[..d].copy_from_slice(&dirs[k * d..(k + 1) * d]);
            row[d] = 0.0;
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.n_in, layer.n_out);
            let w = &theta[layer.w..layer.b];
            let b = &theta[layer.b..layer.b + n_out];
            {
                let z = &mut s.z[l];
                z.copy_from_slice(b);
                for (i, &ai) in s.a[l].iter().enumerate() {
                    axpy(ai, &w[i * n_out..(i + 1) * n_out], z);
                }
            }
            for k in 0..n_dirs {
                let tz = &mut s.tz[l][k * n_out..(k + 1) * n_out];
                tz.fill(0.0);
                let ta = &s.ta[l][k * n_in..(k + 1) * n_in];
                // the t row carries no tangent
                for (i, &ai) in ta[..n_in - 1].iter().enumerate() {
                    if ai != 0.0 {
                        axpy(ai, &w[i * n_out..(i + 1) * n_out], tz);
                    }
                }
            }
            if layer.hidden {
                let next_in = self.layers[l + 1].n_in;
                let a_next = &mut s.a[l + 1];
                for ((a, d), &z) in a_next.iter_mut().zip(s.d1[l].iter_mut()).zip(&s.z[l]).take(n_out) {
                    (*a, *d) = elu(z);
                }
                a_next[n_out] = t;
                let (_, ta_tail) = s.ta.split_at_mut(l + 1);
                let ta_next = &mut ta_tail[0];
                for k in 0..n_dirs {
                    let tz = &s.tz[l][k * n_out..(k + 1) * n_out];
                    let row = &mut ta_next[k * next_in..(k + 1) * next_in];
                    for o in 0..n_out {
                        row[o] = s.d1[l][o] * tz[o];
                    }
                    row[n_out] = 0.0;
                }
            } else {
                debug_assert_eq!(l, last);
            }
        }
    }

    /// Reverse pass over the state left by [`Mlp::eval_into`].
    ///
    /// Accumulates into `grad_theta` the gradient of
    /// `out_adj · v + Σ_k tan_adj[k] · v̇_k`, where `v̇_k` are the output
    /// tangents of the forward pass, and writes the input gradient (excluding
    /// `t`) into `grad_x`.
    pub fn backprop(
        &self,
        theta: &[f64],
        s: &mut Scratch,
        out_adj: &[f64],
        tan_adj: Option<&[f64]>,
        grad_theta: &mut [f64],
        grad_x: &mut [f64],
    ) {
        let d = self.cfg.input_dim;
        let n_dirs = if tan_adj.is_some() { s.n_dirs } else { 0 };
        let last = self.layers.len() - 1;
        let Scratch {
            a,
            z,
            d1,
            ta,
            tz,
            hbar,
            thbar,
            zbar,
            tzbar,
            ..
        } = s;

        for l in (0..=last).rev() {
            let layer = self.layers[l];
            let (n_in, n_out) = (layer.n_in, layer.n_out);
            // adjoints of this layer's pre-activation
            if l == last {
                zbar[..n_out].copy_from_slice(out_adj);
                if let Some(tadj) = tan_adj {
                    tzbar[..n_dirs * n_out].copy_from_slice(&tadj[..n_dirs * n_out]);
                }
            } else {
                for o in 0..n_out {
                    let g1 = d1[l][o];
                    let mut zb = hbar[o] * g1;
                    if z[l][o] <= 0.0 {
                        // second derivative of ELU equals the first on the negative side
                        for k in 0..n_dirs {
                            zb += thbar[k * (n_out + 1) + o] * g1 * tz[l][k * n_out + o];
                        }
                    }
                    zbar[o] = zb;
                    for k in 0..n_dirs {
                        tzbar[k * n_out + o] = thbar[k * (n_out + 1) + o] * g1;
                    }
                }
            }
            let w_off = layer.w;
            let b_off = layer.b;
            {
                let (gw, gb) = grad_theta[w_off..b_off + n_out].split_at_mut(b_off - w_off);
                for (go, zo) in gb.iter_mut().zip(&zbar[..n_out]) {
                    *go += zo;
                }
                for i in 0..n_in {
                    let row = &mut gw[i * n_out..(i + 1) * n_out];
                    let ai = a[l][i];
                    if ai != 0.0 {
                        axpy(ai, &zbar[..n_out], row);
                    }
                    if i < n_in - 1 {
                        for k in 0..n_dirs {
                            let tai = ta[l][k * n_in + i];
                            if tai != 0.0 {
                                axpy(tai, &tzbar[k * n_out..(k + 1) * n_out], row);
                            }
                        }
                    }
                }
            }
            let w = &theta[w_off..b_off];
            if l == 0 {
                for i in 0..d {
                    grad_x[i] = dot(&w[i * n_out..(i + 1) * n_out], &zbar[..n_out]);
                }
            } else {
                for i in 0..n_in - 1 {
                    let wi = &w[i * n_out..(i + 1) * n_out];
                    hbar[i] = dot(wi, &zbar[..n_out]);
                    for k in 0..n_dirs {
                        thbar[k * n_in + i] = dot(wi, &tzbar[k * n_out..(k + 1) * n_out]);
                    }
                }
            }
        }
    }

    fn locate_non_finite(&self, s: &Scratch) -> usize {
        for (l, z) in s.z.iter().enumerate() {
            if z.iter().any(|v| !v.is_finite()) {
                return l;
            }
        }
        self.layers.len() - 1
    }

    fn finite_or_fault(&self, s: &Scratch) -> Result<()> {
        let last = self.layers.len() - 1;
        let tangents_ok = s.tz[last][..s.n_dirs * self.cfg.input_dim]
            .iter()
            .all(|v| v.is_finite());
        if s.z[last].iter().all(|v| v.is_finite()) && tangents_ok {
            Ok(())
        } else {
            Err(Error::NonFiniteLayer {
                layer: self.locate_non_finite(s),
            })
        }
    }

    /// `ṽ_t(x; θ)`.
    pub fn forward(&self, theta: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        let mut s = self.scratch();
        self.eval_into(theta, x, t, &[], &mut s);
        self.finite_or_fault(&s)?;
        Ok(s.output().to_vec())
    }

    /// `∂(upstream · ṽ_t(x; θ)) / ∂θ`.
    pub fn vjp_params(&self, theta: &[f64], x: &[f64], t: f64, upstream: &[f64]) -> Result<ParamVector> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        self.check_input(upstream)?;
        let mut s = self.scratch();
        self.eval_into(theta, x, t, &[], &mut s);
        self.finite_or_fault(&s)?;
        let mut grad = ParamVector::zeros(self.n_params);
        let mut gx = vec![0.0; self.cfg.input_dim];
        self.backprop(theta, &mut s, upstream, None, &mut grad, &mut gx);
        Ok(grad)
    }

    /// `(∂ṽ_t/∂x) · direction`.
    pub fn jvp_input(&self, theta: &[f64], x: &[f64], t: f64, direction: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        self.check_input(direction)?;
        let mut s = self.scratch();
        self.eval_into(theta, x, t, direction, &mut s);
        self.finite_or_fault(&s)?;
        Ok(s.tangent(0).to_vec())
    }

    /// `tr(∂ṽ_t/∂x)`, summing one JVP per basis direction.
    pub fn trace(&self, theta: &[f64], x: &[f64], t: f64) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        let d = self.cfg.input_dim;
        let mut trace = 0.0;
        let mut basis = vec![0.0; d];
        for k in 0..d {
            basis.fill(0.0);
            basis[k] = 1.0;
            trace += self.jvp_input(theta, x, t, &basis)?[k];
        }
        Ok(trace)
    }

    /// Trace of the input Jacobian and its θ-gradient (forward-mode tangents
    /// along each basis direction, reverse pass over the tangent computation).
    pub fn trace_grad_params(&self, theta: &[f64], x: &[f64], t: f64) -> Result<(f64, ParamVector)> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        let d = self.cfg.input_dim;
        let mut s = self.scratch();
        let dirs = identity(d);
        self.eval_into(theta, x, t, &dirs, &mut s);
        self.finite_or_fault(&s)?;
        let trace = s.trace();
        let mut grad = ParamVector::zeros(self.n_params);
        let mut gx = vec![0.0; d];
        let zeros = vec![0.0; d];
        self.backprop(theta, &mut s, &zeros, Some(&dirs), &mut grad, &mut gx);
        Ok((trace, grad))
    }

    /// Parameters realizing `v(x) = A x` wherever every `x_i > -offset`.
    ///
    /// The first layer routes `x_i + offset` through units `0..d` on the
    /// identity branch of ELU, later hidden layers pass those units through,
    /// and the output layer applies `A` and removes the offset. Requires
    /// `hidden_width >= input_dim`; `matrix` is row-major `d x d`.
    pub fn affine_field(&self, matrix: &[f64], offset: f64) -> Result<ParamVector> {
        let d = self.cfg.input_dim;
        if self.cfg.hidden_width < d {
            return Err(Error::config("hidden_width must be at least input_dim"));
        }
        if matrix.len() != d * d {
            return Err(Error::Shape {
                expected: d * d,
                got: matrix.len(),
            });
        }
        let mut theta = ParamVector::zeros(self.n_params);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let n_out = layer.n_out;
            if l == 0 {
                for i in 0..d {
                    theta[layer.w + i * n_out + i] = 1.0;
                    theta[layer.b + i] = offset;
                }
            } else if l < last {
                for i in 0..d {
                    theta[layer.w + i * n_out + i] = 1.0;
                }
            } else {
                for k in 0..d {
                    let mut shift = 0.0;
                    for i in 0..d {
                        let a_ki = matrix[k * d + i];
                        theta[layer.w + i * n_out + k] = a_ki;
                        shift += a_ki;
                    }
                    theta[layer.b + k] = -offset * shift;
                }
            }
        }
        Ok(theta)
    }
}

/// Row-major identity, used as the tangent basis for exact traces.
pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for k in 0..d {
        m[k * d + k] = 1.0;
    }
    m
}

impl Scratch {
    pub fn output(&self) -> &[f64] {
        self.z.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tangent(&self, k: usize) -> &[f64] {
        let out = self.z.last().map(Vec::len).unwrap_or(0);
        &self.tz.last().expect("network has layers")[k * out..(k + 1) * out]
    }

    /// `Σ_k v̇_k[k]`; meaningful after a pass with the identity basis.
    pub fn trace(&self) -> f64 {
        let out = self.z.last().map(Vec::len).unwrap_or(0);
        (0..self.n_dirs.min(out)).map(|k| self.tangent(k)[k]).sum()
    }
}

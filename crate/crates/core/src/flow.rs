//! Fixed-step RK4 integration of the learned flow.
//!
//! Sampling pushes `x0 ~ N(0, I)` from `t = 0` to `t = 1`. The likelihood
//! integrates the augmented state `(x, ℓ)` from `t = 1` back to `t = 0` with
//! `dℓ/dt = tr(∂ṽ_t/∂x)`, so that `log p1(x) = log N(x(0)) + ℓ(0)`. The trace
//! is exact (one tangent per input direction). The NLL gradient is reverse
//! accumulation through the unrolled solver, so it is the exact gradient of
//! the discretized NLL.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{identity, Mlp, ParamVector, Scratch};
use crate::ring::SampleSet;
use crate::rng::{self, Stream};

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Rk4,
            steps: 100,
        }
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: SolverMethod::Rk4,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("solver steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodResult {
    /// `log p1(x)` in nats.
    pub log_p: f64,
    pub latent_point: [f64; 2],
    /// `∫_0^1 tr(∂ṽ_t/∂x) dt` along the path through `x`.
    pub trace_integral: f64,
}

fn check(mlp: &Mlp, theta: &[f64], solver: &SolverConfig) -> Result<()> {
    solver.validate()?;
    if mlp.input_dim() != 2 {
        return Err(Error::config("the flow runtime is two-dimensional"));
    }
    if theta.len() != mlp.n_params() {
        return Err(Error::Shape {
            expected: mlp.n_params(),
            got: theta.len(),
        });
    }
    Ok(())
}

#[inline]
fn log_std_normal(x: [f64; 2]) -> f64 {
    -0.5 * (x[0] * x[0] + x[1] * x[1]) - (2.0 * PI).ln()
}

#[inline]
fn field(mlp: &Mlp, theta: &[f64], x: [f64; 2], t: f64, s: &mut Scratch) -> [f64; 2] {
    mlp.eval_into(theta, &x, t, &[], s);
    let v = s.output();
    [v[0], v[1]]
}

/// RK4 map from `t = 0` to `t = 1`.
pub fn integrate_to_data(mlp: &Mlp, theta: &[f64], x0: [f64; 2], steps: usize, s: &mut Scratch) -> Result<[f64; 2]> {
    integrate_position(mlp, theta, x0, 0.0, 1.0 / steps as f64, steps, s)
}

/// RK4 map from `t = 1` back to `t = 0`, position only.
pub fn integrate_to_latent(mlp: &Mlp, theta: &[f64], x1: [f64; 2], steps: usize, s: &mut Scratch) -> Result<[f64; 2]> {
    integrate_position(mlp, theta, x1, 1.0, -1.0 / steps as f64, steps, s)
}

fn integrate_position(
    mlp: &Mlp,
    theta: &[f64],
    start: [f64; 2],
    t0: f64,
    h: f64,
    steps: usize,
    s: &mut Scratch,
) -> Result<[f64; 2]> {
    let mut x = start;
    for n in 0..steps {
        let t = t0 + n as f64 * h;
        let k1 = field(mlp, theta, x, t, s);
        let k2 = field(
            mlp,
            theta,
            [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]],
            t + 0.5 * h,
            s,
        );
        let k3 = field(
            mlp,
            theta,
            [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]],
            t + 0.5 * h,
            s,
        );
        let k4 = field(mlp, theta, [x[0] + h * k3[0], x[1] + h * k3[1]], t + h, s);
        for i in 0..2 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::NonFinite {
                context: "flow trajectory",
                step: n,
            });
        }
    }
    Ok(x)
}

/// Pushes the given latent points through the flow.
pub fn push_forward(mlp: &Mlp, theta: &[f64], latents: &[[f64; 2]], solver: &SolverConfig) -> Result<Vec<[f64; 2]>> {
    check(mlp, theta, solver)?;
    let chunks: Vec<Result<Vec<[f64; 2]>>> = latents
        .par_chunks(CHUNK * 16)
        .map(|chunk| {
            let mut s = mlp.scratch();
            chunk
                .iter()
                .map(|&x0| integrate_to_data(mlp, theta, x0, solver.steps, &mut s))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(latents.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn draw_latents(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(seed, Stream::Latent);
    (0..n)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

/// Draws `n` latent points from `N(0, I)` and integrates them to `t = 1`.
pub fn generate(mlp: &Mlp, theta: &[f64], n: usize, seed: u64, solver: &SolverConfig) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::config("generate needs n >= 1"));
    }
    let latents = draw_latents(n, seed);
    Ok(SampleSet::new(push_forward(mlp, theta, &latents, solver)?, seed))
}

/// Field value and exact input-Jacobian trace at one point.
#[inline]
fn field_and_trace(mlp: &Mlp, theta: &[f64], x: [f64; 2], t: f64, basis: &[f64], s: &mut Scratch) -> ([f64; 2], f64) {
    mlp.eval_into(theta, &x, t, basis, s);
    let v = s.output();
    ([v[0], v[1]], s.trace())
}

fn log_likelihood_with(
    mlp: &Mlp,
    theta: &[f64],
    x1: [f64; 2],
    steps: usize,
    s: &mut Scratch,
) -> Result<LikelihoodResult> {
    let basis = identity(2);
    let h = -1.0 / steps as f64;
    let mut x = x1;
    let mut ell = 0.0;
    for n in 0..steps {
        let t = 1.0 + n as f64 * h;
        let (k1, tr1) = field_and_trace(mlp, theta, x, t, &basis, s);
        let (k2, tr2) = field_and_trace(
            mlp,
            theta,
            [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]],
            t + 0.5 * h,
            &basis,
            s,
        );
        let (k3, tr3) = field_and_trace(
            mlp,
            theta,
            [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]],
            t + 0.5 * h,
            &basis,
            s,
        );
        let (k4, tr4) = field_and_trace(mlp, theta, [x[0] + h * k3[0], x[1] + h * k3[1]], t + h, &basis, s);
        for i in 0..2 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        ell += h / 6.0 * (tr1 + 2.0 * tr2 + 2.0 * tr3 + tr4);
        if !(x[0].is_finite() && x[1].is_finite() && ell.is_finite()) {
            return Err(Error::NonFinite {
                context: "likelihood trajectory",
                step: n,
            });
        }
    }
    Ok(LikelihoodResult {
        log_p: log_std_normal(x) + ell,
        latent_point: x,
        trace_integral: -ell,
    })
}

pub fn log_likelihood(mlp: &Mlp, theta: &[f64], x: [f64; 2], solver: &SolverConfig) -> Result<LikelihoodResult> {
    check(mlp, theta, solver)?;
    if !(x[0].is_finite() && x[1].is_finite()) {
        return Err(Error::Degenerate("non-finite input point".into()));
    }
    let mut s = mlp.scratch();
    log_likelihood_with(mlp, theta, x, solver.steps, &mut s)
}

/// `log p1` for many points, evaluated in parallel.
pub fn log_likelihood_batch(mlp: &Mlp, theta: &[f64], points: &[[f64; 2]], solver: &SolverConfig) -> Result<Vec<f64>> {
    check(mlp, theta, solver)?;
    let chunks: Vec<Result<Vec<f64>>> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = mlp.scratch();
            chunk
                .iter()
                .map(|&x| log_likelihood_with(mlp, theta, x, solver.steps, &mut s).map(|r| r.log_p))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Forward tape of one point: a network state per RK4 stage.
struct Tape {
    stages: Vec<Scratch>,
    grad_x: [f64; 2],
}

impl Tape {
    fn new(mlp: &Mlp, steps: usize) -> Self {
        Self {
            stages: vec![mlp.scratch(); 4 * steps],
            grad_x: [0.0; 2],
        }
    }
}

/// NLL of one point; accumulates its θ-gradient into `grad`.
fn point_nll_grad(
    mlp: &Mlp,
    theta: &[f64],
    x1: [f64; 2],
    steps: usize,
    tape: &mut Tape,
    grad: &mut [f64],
) -> Result<f64> {
    let basis = identity(2);
    let h = -1.0 / steps as f64;
    let mut x = x1;
    let mut ell = 0.0;
    let mut k = [[0.0; 2]; 4];
    let mut tr = [0.0; 4];
    for n in 0..steps {
        let t = 1.0 + n as f64 * h;
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        for stage in 0..4 {
            let y = if stage == 0 {
                x
            } else {
                let prev = k[stage - 1];
                [x[0] + offsets[stage] * prev[0], x[1] + offsets[stage] * prev[1]]
            };
            let s = &mut tape.stages[4 * n + stage];
            mlp.eval_into(theta, &y, t + offsets[stage], &basis, s);
            let v = s.output();
            k[stage] = [v[0], v[1]];
            tr[stage] = s.trace();
        }
        for i in 0..2 {
            x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        ell += h / 6.0 * (tr[0] + 2.0 * tr[1] + 2.0 * tr[2] + tr[3]);
        if !(x[0].is_finite() && x[1].is_finite() && ell.is_finite()) {
            return Err(Error::NonFinite {
                context: "likelihood trajectory",
                step: n,
            });
        }
    }
    let nll = -(log_std_normal(x) + ell);

    // reverse sweep; d nll / d x(0) = x(0), d nll / d ℓ = -1
    let mut xbar = x;
    let ellbar = -1.0;
    let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
    for n in (0..steps).rev() {
        let mut kbar = [[0.0; 2]; 4];
        for stage in 0..4 {
            kbar[stage] = [weights[stage] * xbar[0], weights[stage] * xbar[1]];
        }
        let mut xbar_n = xbar;
        for stage in (0..4).rev() {
            let tbar = weights[stage] * ellbar;
            let tan_adj = [tbar, 0.0, 0.0, tbar];
            let s = &mut tape.stages[4 * n + stage];
            mlp.backprop(theta, s, &kbar[stage], Some(&tan_adj), grad, &mut tape.grad_x);
            let g = tape.grad_x;
            xbar_n[0] += g[0];
            xbar_n[1] += g[1];
            if stage > 0 {
                kbar[stage - 1][0] += offsets[stage] * g[0];
                kbar[stage - 1][1] += offsets[stage] * g[1];
            }
        }
        xbar = xbar_n;
    }
    Ok(nll)
}

/// Summed NLL `-Σ log p1(x_i)` over the batch and its θ-gradient.
pub fn nll_and_grad(mlp: &Mlp, theta: &[f64], batch: &[[f64; 2]], solver: &SolverConfig) -> Result<(f64, ParamVector)> {
    check(mlp, theta, solver)?;
    if batch.is_empty() {
        return Err(Error::Degenerate("empty likelihood batch".into()));
    }
    let n_params = mlp.n_params();
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new(mlp, solver.steps);
            let mut grad = vec![0.0; n_params];
            let mut nll = 0.0;
            for &x in chunk {
                nll += point_nll_grad(mlp, theta, x, solver.steps, &mut tape, &mut grad)?;
            }
            Ok((nll, grad))
        })
        .collect();
    let mut nll = 0.0;
    let mut grad = ParamVector::zeros(n_params);
    for p in partials {
        let (l, g) = p?;
        nll += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((nll, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn small_mlp() -> Mlp {
        Mlp::new(&NetConfig {
            hidden_layers: 2,
            hidden_width: 8,
            ..NetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_field_keeps_latents() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let theta = ParamVector::zeros(mlp.n_params());
        let set = generate(&mlp, &theta, 20, 5, &SolverConfig::default()).unwrap();
        assert_eq!(set.points, draw_latents(20, 5));
    }

    #[test]
    fn zero_field_likelihood_is_gaussian() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let theta = ParamVector::zeros(mlp.n_params());
        let x = [0.7, -1.1];
        let r = log_likelihood(&mlp, &theta, x, &SolverConfig::rk4(7)).unwrap();
        assert_eq!(r.log_p, log_std_normal(x));
        assert_eq!(r.latent_point, x);
    }

    #[test]
    fn batch_nll_is_sum_of_points() {
        let mlp = small_mlp();
        let theta = mlp.init_params(3);
        let solver = SolverConfig::rk4(5);
        let a = [1.0, 2.0];
        let b = [-0.5, 0.3];
        let (both, _) = nll_and_grad(&mlp, &theta, &[a, b], &solver).unwrap();
        let (na, _) = nll_and_grad(&mlp, &theta, &[a], &solver).unwrap();
        let (nb, _) = nll_and_grad(&mlp, &theta, &[b], &solver).unwrap();
        assert!((both - (na + nb)).abs() < 1e-12);
        let la = log_likelihood(&mlp, &theta, a, &solver).unwrap();
        assert!((na + la.log_p).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mlp = small_mlp();
        let theta = mlp.init_params(3);
        assert!(nll_and_grad(&mlp, &theta, &[], &SolverConfig::rk4(2)).is_err());
    }

    #[test]
    fn exploding_field_reports_step() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let theta = mlp.affine_field(&[1e200, 0.0, 0.0, 1e200], 1e3).unwrap();
        let err = integrate_to_data(&mlp, &theta, [1.0, 1.0], 10, &mut mlp.scratch());
        assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
    }
}

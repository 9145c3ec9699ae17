//! AdamMCMC: a Metropolis-Hastings chain over network weights whose proposal
//! is centered on an Adam step,
//!
//! ```text
//! θ̃ = Adam(θ, ∇L(θ)),   Δ = θ̃ - θ,   τ ~ N(θ̃, σ² I + σ_Δ ΔΔᵀ),
//! ```
//!
//! and accepted with probability `min(1, α)`,
//! `α = exp(-λ L(τ)) q(θ | τ) / (exp(-λ L(θ)) q(τ | θ))`.
//!
//! The reverse density `q(θ | τ)` is centered on an Adam step taken from `τ`
//! with a copy of the optimizer moments the forward proposal started from.
//! The persistent moments always advance with the forward step, whether or
//! not the proposal is accepted.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::flow::{self, SolverConfig};
use crate::net::{Mlp, ParamVector};
use crate::posterior::{PosteriorEnsemble, Provenance};
use crate::rng::{self, Rng, Stream};

/// How the proposal noise `σ` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `σ` is the isotropic standard deviation itself.
    #[default]
    Absolute,
    /// The isotropic standard deviation is `σ · learning_rate`.
    LearningRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub sigma: f64,
    pub sigma_delta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Epochs between recorded ensemble members.
    pub thin_gap: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub noise_scale: NoiseScale,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            sigma_delta: 50.0,
            lambda: 1.0,
            learning_rate: 1e-3,
            thin_gap: 100,
            n_samples: 10,
            burn_in: 0,
            noise_scale: NoiseScale::Absolute,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        if !(self.sigma_delta >= 0.0) {
            return Err(Error::config("sigma_delta must be nonnegative"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.thin_gap == 0 || self.n_samples == 0 {
            return Err(Error::config("thin_gap and n_samples must be positive"));
        }
        Ok(())
    }

    /// Isotropic proposal standard deviation.
    pub fn noise_std(&self) -> f64 {
        match self.noise_scale {
            NoiseScale::Absolute => self.sigma,
            NoiseScale::LearningRate => self.sigma * self.learning_rate,
        }
    }
}

/// The negative log-likelihood a chain samples from.
pub trait NllTarget {
    fn n_params(&self) -> usize;

    fn nll(&self, theta: &[f64]) -> Result<f64>;

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)>;

    /// Called once before every MH step; stochastic targets pick their
    /// mini-batch here.
    fn begin_step(&mut self, _rng: &mut Rng) {}

    /// Steps that make up one epoch.
    fn steps_per_epoch(&self) -> usize {
        1
    }

    /// Whether `nll` is the same function at every step, which makes the
    /// gradient of an accepted proposal reusable.
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// `L(θ) = ½ (θ - c)ᵀ A (θ - c)` for a symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct QuadraticNll {
    pub precision: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticNll {
    pub fn new(precision: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        let n = center.len();
        if precision.len() != n * n {
            return Err(Error::Shape {
                expected: n * n,
                got: precision.len(),
            });
        }
        Ok(Self { precision, center })
    }

    fn residual_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.center.len();
        let r: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        let ar: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.precision[i * n + j] * r[j]).sum())
            .collect();
        let nll = 0.5 * r.iter().zip(&ar).map(|(a, b)| a * b).sum::<f64>();
        (nll, ar)
    }
}

impl NllTarget for QuadraticNll {
    fn n_params(&self) -> usize {
        self.center.len()
    }

    fn nll(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.residual_and_grad(theta).0)
    }

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)> {
        let (nll, g) = self.residual_and_grad(theta);
        Ok((nll, g.into()))
    }
}

/// Reduction applied to per-point NLLs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Flow NLL over a data set, full batch or resampled mini-batches.
pub struct FlowNll<'a> {
    mlp: &'a Mlp,
    data: &'a [[f64; 2]],
    solver: SolverConfig,
    reduction: Reduction,
    batch_size: Option<usize>,
    batch: Vec<[f64; 2]>,
}

impl<'a> FlowNll<'a> {
    pub fn new(
        mlp: &'a Mlp,
        data: &'a [[f64; 2]],
        solver: SolverConfig,
        reduction: Reduction,
        batch_size: Option<usize>,
    ) -> Result<Self> {
        solver.validate()?;
        if data.is_empty() {
            return Err(Error::Degenerate("empty likelihood data".into()));
        }
        if let Some(b) = batch_size {
            if b == 0 || b > data.len() {
                return Err(Error::config("mcmc batch size must lie in 1..=N"));
            }
        }
        Ok(Self {
            mlp,
            data,
            solver,
            reduction,
            batch_size,
            batch: Vec::new(),
        })
    }

    fn points(&self) -> &[[f64; 2]] {
        match self.batch_size {
            Some(_) => &self.batch,
            None => self.data,
        }
    }

    fn scale(&self) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / self.points().len() as f64,
        }
    }
}

impl NllTarget for FlowNll<'_> {
    fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    fn nll(&self, theta: &[f64]) -> Result<f64> {
        let lp = flow::log_likelihood_batch(self.mlp, theta, self.points(), &self.solver)?;
        Ok(-lp.iter().sum::<f64>() * self.scale())
    }

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)> {
        let (nll, mut grad) = flow::nll_and_grad(self.mlp, theta, self.points(), &self.solver)?;
        let s = self.scale();
        if s != 1.0 {
            grad.iter_mut().for_each(|g| *g *= s);
        }
        Ok((nll * s, grad))
    }

    fn begin_step(&mut self, rng: &mut Rng) {
        if let Some(b) = self.batch_size {
            let n = self.data.len();
            self.batch.clear();
            self.batch.extend((0..b).map(|_| self.data[rng.random_range(0..n)]));
        }
    }

    fn steps_per_epoch(&self) -> usize {
        match self.batch_size {
            Some(b) => self.data.len().div_ceil(b),
            None => 1,
        }
    }

    fn is_deterministic(&self) -> bool {
        self.batch_size.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: ParamVector,
    pub adam: AdamState,
    pub nll: f64,
    grad: Option<ParamVector>,
    pub accepted_count: usize,
    pub step_count: usize,
}

impl ChainState {
    pub fn new(target: &impl NllTarget, theta: ParamVector) -> Result<Self> {
        if theta.len() != target.n_params() {
            return Err(Error::Shape {
                expected: target.n_params(),
                got: theta.len(),
            });
        }
        let (nll, grad) = target.nll_and_grad(&theta)?;
        if !nll.is_finite() {
            return Err(Error::NonFinite {
                context: "initial nll",
                step: 0,
            });
        }
        Ok(Self {
            adam: AdamState::new(theta.len()),
            theta,
            nll,
            grad: Some(grad),
            accepted_count: 0,
            step_count: 0,
        })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.accepted_count as f64 / self.step_count as f64
        }
    }
}

/// A draw from `q(· | θ)` together with the Adam step it is centered on.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub tau: ParamVector,
    pub theta_tilde: ParamVector,
}

/// `τ = θ̃ + σ ε + sqrt(σ_Δ) η Δ` with `ε ~ N(0, I)`, `η ~ N(0, 1)`, which has
/// covariance `σ² I + σ_Δ ΔΔᵀ`.
pub fn sample_proposal(
    theta: &[f64],
    theta_tilde: &[f64],
    noise_std: f64,
    sigma_delta: f64,
    rng: &mut Rng,
) -> ParamVector {
    let eta: f64 = StandardNormal.sample(rng);
    let along = sigma_delta.sqrt() * eta;
    theta
        .iter()
        .zip(theta_tilde)
        .map(|(&th, &tt)| {
            let eps: f64 = StandardNormal.sample(rng);
            tt + noise_std * eps + along * (tt - th)
        })
        .collect::<Vec<_>>()
        .into()
}

/// Adam step from the chain state with `grad`, then a proposal draw. The
/// state's moments are advanced.
pub fn propose(state: &mut ChainState, grad: &[f64], cfg: &McmcConfig, rng: &mut Rng) -> Proposal {
    let mut theta_tilde = state.theta.clone();
    state.adam.step(&mut theta_tilde, grad, cfg.learning_rate);
    let tau = sample_proposal(&state.theta, &theta_tilde, cfg.noise_std(), cfg.sigma_delta, rng);
    Proposal { tau, theta_tilde }
}

/// Log-density of `N(mean, σ² I + σ_Δ ΔΔᵀ)` at `x`, using Sherman-Morrison
/// for the inverse and the matrix determinant lemma for the determinant.
pub fn log_q(x: &[f64], mean: &[f64], delta: &[f64], noise_std: f64, sigma_delta: f64) -> Result<f64> {
    if !(noise_std > 0.0) {
        return Err(Error::Degenerate("proposal density needs sigma > 0".into()));
    }
    if x.len() != mean.len() || delta.len() != mean.len() {
        return Err(Error::Shape {
            expected: mean.len(),
            got: x.len().min(delta.len()),
        });
    }
    let p = x.len() as f64;
    let s2 = noise_std * noise_std;
    let (mut rr, mut dd, mut dr) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        rr += r * r;
        dd += delta[i] * delta[i];
        dr += delta[i] * r;
    }
    let logdet = p * s2.ln() + (sigma_delta * dd / s2).ln_1p();
    let quad = (rr - sigma_delta * dr * dr / (s2 + sigma_delta * dd)) / s2;
    Ok(-0.5 * (p * (2.0 * PI).ln() + logdet + quad))
}

/// `log α` for a move from a state with NLL `nll_from` to one with `nll_to`.
pub fn log_acceptance(lambda: f64, nll_from: f64, nll_to: f64, log_q_reverse: f64, log_q_forward: f64) -> f64 {
    -lambda * (nll_to - nll_from) + log_q_reverse - log_q_forward
}

/// Outcome of a single MH step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub accepted: bool,
    pub nll: f64,
    pub log_alpha: f64,
}

/// One AdamMCMC step. Non-finite acceptance ratios reject.
pub fn mh_step(
    state: &mut ChainState,
    target: &impl NllTarget,
    cfg: &McmcConfig,
    proposal_rng: &mut Rng,
    accept_rng: &mut Rng,
) -> Result<StepRecord> {
    let grad = match state.grad.take() {
        Some(g) if target.is_deterministic() => g,
        _ => {
            let (nll, g) = target.nll_and_grad(&state.theta)?;
            state.nll = nll;
            g
        }
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            context: "mcmc gradient",
            step: state.step_count,
        });
    }
    let moments = state.adam.clone();
    let Proposal { tau, theta_tilde } = propose(state, &grad, cfg, proposal_rng);
    let noise = cfg.noise_std();

    let forward_delta: Vec<f64> = theta_tilde.iter().zip(state.theta.iter()).map(|(a, b)| a - b).collect();
    let log_q_forward = log_q(&tau, &theta_tilde, &forward_delta, noise, cfg.sigma_delta)?;

    let (log_alpha, nll_tau, grad_tau) = match target.nll_and_grad(&tau) {
        Ok((nll_tau, grad_tau)) if nll_tau.is_finite() && grad_tau.is_finite() => {
            let (_, back) = moments.stepped(&tau, &grad_tau, cfg.learning_rate);
            let reverse_delta: Vec<f64> = back.iter().zip(tau.iter()).map(|(a, b)| a - b).collect();
            let log_q_reverse = log_q(&state.theta, &back, &reverse_delta, noise, cfg.sigma_delta)?;
            let la = log_acceptance(cfg.lambda, state.nll, nll_tau, log_q_reverse, log_q_forward);
            (la, nll_tau, Some(grad_tau))
        }
        Ok(_) | Err(Error::NonFiniteLayer { .. }) | Err(Error::NonFinite { .. }) => (f64::NAN, f64::NAN, None),
        Err(e) => return Err(e),
    };

    let u: f64 = accept_rng.random();
    state.step_count += 1;
    let accepted = log_alpha.is_finite() && u.ln() < log_alpha;
    if !log_alpha.is_finite() {
        log::warn!(
            "mcmc step {}: non-finite acceptance ratio, rejecting",
            state.step_count - 1
        );
    }
    if accepted {
        state.theta = tau;
        state.nll = nll_tau;
        state.grad = grad_tau;
        state.accepted_count += 1;
    } else {
        state.grad = Some(grad);
    }
    Ok(StepRecord {
        accepted,
        nll: state.nll,
        log_alpha,
    })
}

/// Per-step acceptance record of a chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceHistory {
    pub steps: Vec<StepRecord>,
}

impl AcceptanceHistory {
    pub fn rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.accepted).count() as f64 / self.steps.len() as f64
    }

    /// `step,accepted,nll,log_alpha`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,accepted,nll,log_alpha").map_err(io)?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(w, "{i},{},{:.16e},{:.16e}", u8::from(s.accepted), s.nll, s.log_alpha).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone)]
pub struct McmcRun {
    pub ensemble: PosteriorEnsemble,
    pub history: AcceptanceHistory,
    pub state: ChainState,
}

/// Runs `burn_in + n_samples · thin_gap` epochs from `init` and keeps the
/// state at the end of every `thin_gap`-th epoch after burn-in.
pub fn run_chain(target: &mut impl NllTarget, init: ParamVector, cfg: &McmcConfig) -> Result<McmcRun> {
    cfg.validate()?;
    let mut proposal_rng = rng::stream(cfg.seed, Stream::Proposal);
    let mut accept_rng = rng::stream(cfg.seed, Stream::Accept);
    let mut batch_rng = rng::stream(cfg.seed, Stream::Batches);
    target.begin_step(&mut batch_rng);
    let mut state = ChainState::new(target, init)?;
    let per_epoch = target.steps_per_epoch();
    let mut history = AcceptanceHistory::default();
    let mut members = Vec::with_capacity(cfg.n_samples);
    let total_epochs = cfg.burn_in + cfg.n_samples * cfg.thin_gap;
    for epoch in 1..=total_epochs {
        for _ in 0..per_epoch {
            if !history.steps.is_empty() {
                target.begin_step(&mut batch_rng);
            }
            let record = mh_step(&mut state, target, cfg, &mut proposal_rng, &mut accept_rng)?;
            history.steps.push(record);
        }
        if epoch > cfg.burn_in && (epoch - cfg.burn_in).is_multiple_of(cfg.thin_gap) {
            log::debug!(
                "mcmc epoch {epoch}: nll {:.4}, acceptance {:.3}",
                state.nll,
                state.acceptance_rate()
            );
            members.push(state.theta.clone());
        }
    }
    let ensemble = PosteriorEnsemble::new(
        members,
        Provenance::Mcmc {
            sigma: cfg.sigma,
            thin_gap: cfg.thin_gap,
            seed: cfg.seed,
        },
    )?;
    Ok(McmcRun {
        ensemble,
        history,
        state,
    })
}

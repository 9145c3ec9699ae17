//! Mean-field Gaussian weight posterior trained on the CFM surrogate of the
//! variational objective: `E_q[L_CFM] + k·s·KL(q ‖ prior)` with a single
//! reparameterized draw per step. `s` rescales the summed KL to the per-point
//! units of the batch-mean CFM loss (default `1/N_train`).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::cfm::{cfm_loss_and_grad_with, PathDraw, TrainStreams};
use crate::error::{Error, Result};
use crate::net::{Mlp, ParamVector};
use crate::posterior::{PosteriorEnsemble, Provenance};
use crate::ring::SampleSet;
use crate::rng::{self, Rng, Stream};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarPosterior {
    pub mean: ParamVector,
    pub rho: ParamVector,
}

impl VarPosterior {
    /// Centered on `mean` with every standard deviation equal to `std`.
    pub fn new(mean: ParamVector, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::config("initial posterior std must be positive"));
        }
        let rho = ParamVector::from_vec(vec![softplus_inv(std); mean.len()]);
        Ok(Self { mean, rho })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.rho.len() {
            return Err(Error::Shape {
                expected: self.mean.len(),
                got: self.rho.len(),
            });
        }
        if !self.mean.is_finite() || !self.rho.is_finite() {
            return Err(Error::Degenerate("non-finite variational parameters".into()));
        }
        Ok(())
    }

    fn sample_with(&self, rng: &mut Rng, eps: &mut [f64]) -> ParamVector {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        self.mean
            .iter()
            .zip(self.rho.iter())
            .zip(eps.iter())
            .map(|((&m, &r), &e)| m + softplus(r) * e)
            .collect::<Vec<_>>()
            .into()
    }
}

pub fn draw_params(q: &VarPosterior, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, Stream::Weights);
    let mut eps = vec![0.0; q.len()];
    q.sample_with(&mut rng, &mut eps)
}

/// KL(q ‖ N(0, prior_std² I)) summed over parameters.
pub fn kl_to_prior(q: &VarPosterior, prior_std: f64) -> f64 {
    let p2 = prior_std * prior_std;
    q.mean
        .iter()
        .zip(q.rho.iter())
        .map(|(&m, &r)| {
            let s = softplus(r);
            (prior_std / s).ln() + (s * s + m * m) / (2.0 * p2) - 0.5
        })
        .sum()
}

/// Gradient of [`kl_to_prior`] with respect to `(mean, rho)`, accumulated
/// with weight `scale`.
fn add_kl_grad(q: &VarPosterior, prior_std: f64, scale: f64, g_mean: &mut [f64], g_rho: &mut [f64]) {
    let p2 = prior_std * prior_std;
    for i in 0..q.len() {
        let s = softplus(q.rho[i]);
        g_mean[i] += scale * q.mean[i] / p2;
        g_rho[i] += scale * (s / p2 - 1.0 / s) * sigmoid(q.rho[i]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VibConfig {
    pub k: f64,
    pub prior_std: f64,
    /// Factor applied to `k·KL`; `None` means `1 / N_train`.
    pub kl_scale: Option<f64>,
    pub init_std: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub sigma_min: f64,
    /// Stop once the KL term changes by less than `plateau_tol` (relative)
    /// over `plateau_window` steps. `None` disables the rule.
    pub plateau_window: Option<usize>,
    pub plateau_tol: f64,
    /// Keep `rho` at its initial value.
    pub freeze_rho: bool,
    pub seed: u64,
}

impl Default for VibConfig {
    fn default() -> Self {
        Self {
            k: 10.0,
            prior_std: 1.0,
            kl_scale: None,
            init_std: 1e-3,
            learning_rate: 1e-3,
            epochs: 2000,
            batches_per_epoch: 10,
            batch_size: 1000,
            sigma_min: 1e-4,
            plateau_window: Some(1000),
            plateau_tol: 1e-3,
            freeze_rho: false,
            seed: 0,
        }
    }
}

impl VibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::config("k must be positive"));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::config("prior_std must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        if let Some(s) = self.kl_scale {
            if !(s >= 0.0) {
                return Err(Error::config("kl_scale must be nonnegative"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("batch_size and batches_per_epoch must be positive"));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::config("sigma_min must lie in [0, 1)"));
        }
        if self.plateau_window == Some(0) {
            return Err(Error::config("plateau_window must be positive"));
        }
        Ok(())
    }
}

/// Per-step record of both objective terms. `kl` is the unscaled KL.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VibHistory {
    pub cfm_loss: Vec<f64>,
    pub kl: Vec<f64>,
    /// Step after which the plateau rule stopped training.
    pub stopped_at: Option<usize>,
}

impl VibHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,cfm_loss,kl").map_err(io)?;
        for (i, (l, k)) in self.cfm_loss.iter().zip(&self.kl).enumerate() {
            writeln!(w, "{i},{l:.16e},{k:.16e}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn plateaued(kl: &[f64], window: usize, tol: f64) -> bool {
    let n = kl.len();
    if n <= window {
        return false;
    }
    let (old, new) = (kl[n - 1 - window], kl[n - 1]);
    (new - old).abs() <= tol * old.abs()
}

#[derive(Debug, Clone)]
pub struct VibRun {
    pub posterior: VarPosterior,
    pub history: VibHistory,
}

/// Trains `init` on `data`. Batches and path draws come from the same seed
/// streams as [`crate::cfm::train_cfm`], weight draws from their own stream.
pub fn train_vib(mlp: &Mlp, data: &SampleSet, cfg: &VibConfig, init: VarPosterior) -> Result<VibRun> {
    cfg.validate()?;
    init.validate()?;
    if init.len() != mlp.n_params() {
        return Err(Error::Shape {
            expected: mlp.n_params(),
            got: init.len(),
        });
    }
    if data.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "training set of {} points is smaller than the batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let p = init.len();
    let kl_weight = cfg.k * cfg.kl_scale.unwrap_or(1.0 / data.len() as f64);
    let mut q = init;
    let mut packed = vec![0.0; 2 * p];
    let mut grad = vec![0.0; 2 * p];
    let mut eps = vec![0.0; p];
    let mut adam = AdamState::new(2 * p);
    let mut streams = TrainStreams::new(cfg.seed);
    let mut weights = rng::stream(cfg.seed, Stream::Weights);
    let mut history = VibHistory::default();

    for step in 0..cfg.epochs * cfg.batches_per_epoch {
        let theta = q.sample_with(&mut weights, &mut eps);
        let (batch, draws) = streams.next_batch(data, cfg.batch_size);
        let rename = |e| match e {
            Error::NonFiniteLayer { .. } => Error::NonFinite {
                context: "vib loss",
                step,
            },
            other => other,
        };
        let obj = objective_at(
            mlp,
            &q,
            &theta,
            &eps,
            &batch,
            &draws,
            cfg.sigma_min,
            cfg.prior_std,
            kl_weight,
            &mut grad,
        )
        .map_err(rename)?;
        if !obj.cfm_loss.is_finite() || !obj.kl.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "vib loss",
                step,
            });
        }
        let (loss, kl) = (obj.cfm_loss, obj.kl);
        let g_rho = &mut grad[p..];
        if cfg.freeze_rho {
            g_rho.fill(0.0);
        }
        packed[..p].copy_from_slice(&q.mean);
        packed[p..].copy_from_slice(&q.rho);
        adam.step(&mut packed, &grad, cfg.learning_rate);
        q.mean.copy_from_slice(&packed[..p]);
        q.rho.copy_from_slice(&packed[p..]);

        history.cfm_loss.push(loss);
        history.kl.push(kl);
        if let Some(window) = cfg.plateau_window {
            if plateaued(&history.kl, window, cfg.plateau_tol) {
                history.stopped_at = Some(step);
                log::info!("vib: KL plateau at step {step}");
                break;
            }
        }
    }
    Ok(VibRun { posterior: q, history })
}

/// Both terms of the objective `L_CFM(θ) + k_eff · KL(q ‖ prior)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VibObjective {
    pub cfm_loss: f64,
    pub kl: f64,
    pub total: f64,
}

/// Single-sample objective with `θ = mean + softplus(rho) ⊙ eps`, and its
/// gradient with respect to `[mean; rho]` for that frozen `eps`.
#[allow(clippy::too_many_arguments)]
pub fn vib_objective(
    mlp: &Mlp,
    q: &VarPosterior,
    eps: &[f64],
    points: &[[f64; 2]],
    draws: &[PathDraw],
    sigma_min: f64,
    prior_std: f64,
    kl_weight: f64,
) -> Result<(VibObjective, Vec<f64>)> {
    q.validate()?;
    if eps.len() != q.len() || q.len() != mlp.n_params() {
        return Err(Error::Shape {
            expected: mlp.n_params(),
            got: eps.len(),
        });
    }
    let theta: Vec<f64> = (0..q.len()).map(|i| q.mean[i] + softplus(q.rho[i]) * eps[i]).collect();
    let mut grad = vec![0.0; 2 * q.len()];
    let obj = objective_at(
        mlp, q, &theta, eps, points, draws, sigma_min, prior_std, kl_weight, &mut grad,
    )?;
    Ok((obj, grad))
}

#[allow(clippy::too_many_arguments)]
fn objective_at(
    mlp: &Mlp,
    q: &VarPosterior,
    theta: &[f64],
    eps: &[f64],
    points: &[[f64; 2]],
    draws: &[PathDraw],
    sigma_min: f64,
    prior_std: f64,
    kl_weight: f64,
    grad: &mut [f64],
) -> Result<VibObjective> {
    let p = q.len();
    let (loss, g) = cfm_loss_and_grad_with(mlp, theta, points, draws, sigma_min)?;
    let kl = kl_to_prior(q, prior_std);
    let (g_mean, g_rho) = grad.split_at_mut(p);
    for i in 0..p {
        g_mean[i] = g[i];
        g_rho[i] = g[i] * eps[i] * sigmoid(q.rho[i]);
    }
    add_kl_grad(q, prior_std, kl_weight, g_mean, g_rho);
    Ok(VibObjective {
        cfm_loss: loss,
        kl,
        total: loss + kl_weight * kl,
    })
}

/// `n` independent draws from `q`.
pub fn draw_ensemble(q: &VarPosterior, n: usize, k: f64, seed: u64) -> Result<PosteriorEnsemble> {
    let mut rng = rng::stream(seed, Stream::Weights);
    let mut eps = vec![0.0; q.len()];
    let members = (0..n).map(|_| q.sample_with(&mut rng, &mut eps)).collect();
    PosteriorEnsemble::new(members, Provenance::Vib { k, seed })
}

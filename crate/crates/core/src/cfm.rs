//! Conditional flow matching on the optimal-transport path and Adam training
//! of the deterministic vector field.
//!
//! For a data point `x1`, latent `x0 ~ N(0, I)` and `t ~ U(0, 1)` the network
//! is regressed at `x_t = σ_t x0 + t x1`, `σ_t = 1 - (1 - σ_min) t`, onto the
//! conditional velocity `x1 - (1 - σ_min) x0`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::net::{Mlp, ParamVector};
use crate::ring::SampleSet;
use crate::rng::{self, Rng, Stream};

const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfmConfig {
    pub sigma_min: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            learning_rate: 1e-3,
            epochs: 2500,
            batches_per_epoch: 10,
            batch_size: 1000,
            seed: 0,
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::config("sigma_min must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("batch_size and batches_per_epoch must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// One frozen draw of the probability path: time and latent point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathDraw {
    pub t: f64,
    pub x0: [f64; 2],
}

pub fn draw_paths(rng: &mut Rng, n: usize) -> Vec<PathDraw> {
    (0..n)
        .map(|_| {
            let t: f64 = rng.random();
            let x0 = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            PathDraw { t, x0 }
        })
        .collect()
}

/// Batch-mean CFM loss and its θ-gradient for fixed path draws.
pub fn cfm_loss_and_grad_with(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[[f64; 2]],
    draws: &[PathDraw],
    sigma_min: f64,
) -> Result<(f64, ParamVector)> {
    if x1.is_empty() {
        return Err(Error::Degenerate("empty CFM batch".into()));
    }
    if x1.len() != draws.len() {
        return Err(Error::Shape {
            expected: x1.len(),
            got: draws.len(),
        });
    }
    if mlp.input_dim() != 2 || theta.len() != mlp.n_params() {
        return Err(Error::Shape {
            expected: mlp.n_params(),
            got: theta.len(),
        });
    }
    let n_params = mlp.n_params();
    let partials: Vec<(f64, Vec<f64>)> = x1
        .par_chunks(CHUNK)
        .zip(draws.par_chunks(CHUNK))
        .map(|(xs, ds)| {
            let mut s = mlp.scratch();
            let mut grad = vec![0.0; n_params];
            let mut gx = [0.0; 2];
            let mut loss = 0.0;
            for (x, d) in xs.iter().zip(ds) {
                let sigma_t = 1.0 - (1.0 - sigma_min) * d.t;
                let xt = [sigma_t * d.x0[0] + d.t * x[0], sigma_t * d.x0[1] + d.t * x[1]];
                let target = [x[0] - (1.0 - sigma_min) * d.x0[0], x[1] - (1.0 - sigma_min) * d.x0[1]];
                mlp.eval_into(theta, &xt, d.t, &[], &mut s);
                let v = s.output();
                let r = [v[0] - target[0], v[1] - target[1]];
                loss += r[0] * r[0] + r[1] * r[1];
                mlp.backprop(theta, &mut s, &[2.0 * r[0], 2.0 * r[1]], None, &mut grad, &mut gx);
            }
            (loss, grad)
        })
        .collect();
    let scale = 1.0 / x1.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(n_params);
    for (l, g) in partials {
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Draws `(t, x0)` per element from `rng`, then evaluates the loss.
pub fn cfm_loss_and_grad(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[[f64; 2]],
    sigma_min: f64,
    rng: &mut Rng,
) -> Result<(f64, ParamVector)> {
    let draws = draw_paths(rng, x1.len());
    cfm_loss_and_grad_with(mlp, theta, x1, &draws, sigma_min)
}

/// Per-step loss record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    pub fn epoch_means(&self, batches_per_epoch: usize) -> Vec<f64> {
        self.losses
            .chunks(batches_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// `step,loss`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,loss").map_err(io)?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{l:.16e}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Random streams consumed by a training run: batch indices and path draws.
pub(crate) struct TrainStreams {
    pub batches: Rng,
    pub paths: Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            batches: rng::stream(seed, Stream::Batches),
            paths: rng::stream(seed, Stream::Paths),
        }
    }

    /// Batch drawn uniformly with replacement, plus its path draws.
    pub fn next_batch(&mut self, data: &SampleSet, batch_size: usize) -> (Vec<[f64; 2]>, Vec<PathDraw>) {
        let n = data.len();
        let batch: Vec<[f64; 2]> = (0..batch_size)
            .map(|_| data.points[self.batches.random_range(0..n)])
            .collect();
        let draws = draw_paths(&mut self.paths, batch_size);
        (batch, draws)
    }
}

#[derive(Debug, Clone)]
pub struct CfmRun {
    pub theta: ParamVector,
    pub history: LossHistory,
}

pub fn train_cfm(mlp: &Mlp, data: &SampleSet, cfg: &CfmConfig, init: ParamVector) -> Result<CfmRun> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "training set of {} points is smaller than the batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if init.len() != mlp.n_params() {
        return Err(Error::Shape {
            expected: mlp.n_params(),
            got: init.len(),
        });
    }
    let mut theta = init;
    let mut adam = AdamState::new(theta.len());
    let mut streams = TrainStreams::new(cfg.seed);
    let mut history = LossHistory::default();
    for step in 0..cfg.total_steps() {
        let (batch, draws) = streams.next_batch(data, cfg.batch_size);
        let (loss, grad) = cfm_loss_and_grad_with(mlp, &theta, &batch, &draws, cfg.sigma_min).map_err(|e| match e {
            Error::NonFiniteLayer { .. } => Error::NonFinite {
                context: "cfm loss",
                step,
            },
            other => other,
        })?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite {
                context: "cfm loss",
                step,
            });
        }
        adam.step(&mut theta, &grad, cfg.learning_rate);
        history.losses.push(loss);
        if step % 5000 == 0 {
            log::debug!("cfm step {step}: loss {loss:.5}");
        }
    }
    Ok(CfmRun { theta, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    #[test]
    fn rejects_sigma_min_of_one() {
        let cfg = CfmConfig {
            sigma_min: 1.0,
            ..CfmConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        // With x1 = 0 the target is -(1 - σ_min) x0 and x_t = σ_t x0, so the
        // linear field v(x) = -(1 - σ_min)/σ_t x is exact at a single fixed t.
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let sigma_min = 0.1;
        let t = 0.5;
        let sigma_t = 1.0 - (1.0 - sigma_min) * t;
        let k = -(1.0 - sigma_min) / sigma_t;
        let theta = mlp.affine_field(&[k, 0.0, 0.0, k], 100.0).unwrap();
        let draws: Vec<PathDraw> = [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]]
            .into_iter()
            .map(|x0| PathDraw { t, x0 })
            .collect();
        let x1 = vec![[0.0, 0.0]; 3];
        let (loss, _) = cfm_loss_and_grad_with(&mlp, &theta, &x1, &draws, sigma_min).unwrap();
        assert!(loss < 1e-24, "{loss}");
    }

    #[test]
    fn zero_epochs_returns_init() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let data = crate::ring::sample_ring(&Default::default(), 1000, 1);
        let init = mlp.init_params(4);
        let cfg = CfmConfig {
            epochs: 0,
            ..CfmConfig::default()
        };
        let run = train_cfm(&mlp, &data, &cfg, init.clone()).unwrap();
        assert_eq!(run.theta, init);
        assert!(run.history.losses.is_empty());
    }

    #[test]
    fn rejects_small_training_set() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let data = crate::ring::sample_ring(&Default::default(), 10, 1);
        let err = train_cfm(&mlp, &data, &CfmConfig::default(), mlp.init_params(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let mlp = Mlp::new(&NetConfig::default()).unwrap();
        let data = crate::ring::sample_ring(&Default::default(), 100, 1);
        let mut init = mlp.init_params(0);
        init[0] = f64::INFINITY;
        let cfg = CfmConfig {
            epochs: 1,
            batch_size: 10,
            ..CfmConfig::default()
        };
        match train_cfm(&mlp, &data, &cfg, init) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}

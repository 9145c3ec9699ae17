#![allow(dead_code)]

use bayesamp::net::{Mlp, NetConfig};
use bayesamp::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config() -> NetConfig {
    NetConfig {
        hidden_layers: 2,
        hidden_width: 6,
        ..NetConfig::default()
    }
}

/// Parameters with Glorot scale plus nonzero biases so every branch of ELU
/// is exercised.
pub fn random_params(mlp: &Mlp, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut theta = mlp.init_params(rng.random());
    for l in 0..mlp.n_layers() {
        let ((_, b), (_, n_out)) = mlp.layer_span(l);
        for v in &mut theta[b..b + n_out] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    theta
}

/// Straight-line re-implementation of the documented layout: for every
/// layer an input-major weight block then a bias, `t` appended to each
/// layer's input, ELU on hidden layers.
pub fn naive_forward(cfg: &NetConfig, theta: &[f64], x: &[f64], t: f64) -> Vec<f64> {
    let mut input: Vec<f64> = x.to_vec();
    let mut offset = 0;
    for l in 0..=cfg.hidden_layers {
        input.push(t);
        let n_in = input.len();
        let n_out = if l < cfg.hidden_layers {
            cfg.hidden_width
        } else {
            cfg.input_dim
        };
        let mut out = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut z = theta[offset + n_in * n_out + o];
            for i in 0..n_in {
                z += theta[offset + i * n_out + o] * input[i];
            }
            out.push(if l < cfg.hidden_layers {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            } else {
                z
            });
        }
        offset += n_in * n_out + n_out;
        input = out;
    }
    assert_eq!(offset, theta.len());
    input
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / ‖b‖` (absolute when `b` vanishes).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 2] {
    [rng.random_range(-scale..scale), rng.random_range(-scale..scale)]
}

/// Central differences at `h` and `h / 4`. Returns `None` when the two
/// disagree, i.e. the perturbation straddles an ELU kink (the second
/// derivative of ELU jumps at 0) and finite differences are not a valid
/// oracle for this configuration.
pub fn smooth_fd_gradient(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Option<Vec<f64>> {
    let coarse = fd_gradient(theta, h, &mut f);
    let fine = fd_gradient(theta, h / 4.0, &mut f);
    (rel_err(&coarse, &fine) < 1e-7).then_some(coarse)
}

/// Runs `check` on `wanted` configurations whose finite differences are
/// smooth, drawing fresh ones as needed. Panics if most draws are rejected.
pub fn on_smooth_configs(wanted: usize, mut check: impl FnMut() -> bool) {
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < wanted {
        attempts += 1;
        assert!(
            attempts <= 2 * wanted,
            "too many non-smooth configurations ({attempts})"
        );
        if check() {
            accepted += 1;
        }
    }
}

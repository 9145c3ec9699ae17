//! Synthetic ensembles built from truth draws instead of a trained flow.
//! They have known calibration and serve as reference inputs for the
//! coverage and amplification machinery.

use std::f64::consts::TAU;

use rand::Rng as _;

use crate::binning::{count_bins, BinEnsembleStats, QuantileGrid};
use crate::error::{Error, Result};
use crate::ring::{sample_ring, RingSpec};
use crate::rng::{self, derive_seed, Stream};

/// Members are independent truth samples of `set_size` points each.
pub fn independent_ensemble(
    spec: &RingSpec,
    grid: &QuantileGrid,
    members: usize,
    set_size: usize,
    seed: u64,
) -> Result<BinEnsembleStats> {
    let counts = (0..members)
        .map(|i| {
            let set = sample_ring(spec, set_size, derive_seed(seed, "member", i as u64));
            count_bins(grid, &set.points)
        })
        .collect::<Result<Vec<_>>>()?;
    BinEnsembleStats::from_frequencies(counts, set_size)
}

/// Exact bin probabilities of the ring distribution on `grid`. Points
/// below the first interior edge fall in the first ring, points beyond the
/// last in the outer one.
pub fn bin_probabilities(spec: &RingSpec, grid: &QuantileGrid) -> Vec<f64> {
    let n = grid.n_per_dim;
    let cdf = |k: usize| match k {
        0 => 0.0,
        k if k == n => 1.0,
        k => spec.radial_cdf(grid.radial_edges[k]),
    };
    let arc = |k: usize| {
        let lo = if k == 0 { 0.0 } else { grid.angular_edges[k] };
        let hi = if k + 1 == n { TAU } else { grid.angular_edges[k + 1] };
        (hi - lo) / TAU
    };
    let mut p = Vec::with_capacity(n * n);
    for jr in 0..n {
        let pr = cdf(jr + 1) - cdf(jr);
        for jp in 0..n {
            p.push(pr * arc(jp));
        }
    }
    p
}

/// A calibrated ensemble. One truth sample of `set_size` points fixes the
/// run centre `ĥ`; member `i` is `ĥ + spread · (h_i − p)` where `h_i` is an
/// independent truth sample and `p` the exact bin probability. For
/// `spread = 1` the true `p` is exchangeable with the members, so quantile
/// intervals of the ensemble cover it at their nominal rate; larger spreads
/// give over-coverage. Frequencies are clipped at zero and renormalized.
pub fn calibrated_ensemble(
    spec: &RingSpec,
    grid: &QuantileGrid,
    members: usize,
    set_size: usize,
    spread: f64,
    seed: u64,
) -> Result<BinEnsembleStats> {
    if set_size == 0 || members == 0 {
        return Err(Error::config("calibrated ensembles need points and members"));
    }
    if !(spread > 0.0) {
        return Err(Error::config("spread must be positive"));
    }
    let p = bin_probabilities(spec, grid);
    let center = count_bins(grid, &sample_ring(spec, set_size, derive_seed(seed, "truth", 0)).points)?;
    let counts = (0..members)
        .map(|i| {
            let draw = sample_ring(spec, set_size, derive_seed(seed, "member", i as u64));
            let h = count_bins(grid, &draw.points)?;
            let mut f: Vec<f64> = (0..p.len())
                .map(|j| (center[j] + spread * (h[j] - p[j])).max(0.0))
                .collect();
            let total: f64 = f.iter().sum();
            f.iter_mut().for_each(|v| *v /= total);
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    BinEnsembleStats::from_frequencies(counts, set_size)
}

/// Members are multinomial resamples of one truth sample of `set_size`
/// points, scaled about its frequencies by `spread` (`1` is the plain
/// bootstrap, larger values overdisperse). The mean prediction then carries
/// the error of a `set_size`-point truth sample, and sparse bins need no
/// clipping at `spread = 1`.
pub fn resampled_ensemble(
    spec: &RingSpec,
    grid: &QuantileGrid,
    members: usize,
    set_size: usize,
    spread: f64,
    seed: u64,
) -> Result<BinEnsembleStats> {
    if set_size == 0 || members == 0 {
        return Err(Error::config("resampled ensembles need points and members"));
    }
    if !(spread > 0.0) {
        return Err(Error::config("spread must be positive"));
    }
    let truth = sample_ring(spec, set_size, derive_seed(seed, "truth", 0));
    let bins: Vec<usize> = truth.points.iter().map(|&p| grid.bin_of(p)).collect();
    let center = count_bins(grid, &truth.points)?;
    let mut rng = rng::stream(derive_seed(seed, "resample", 0), Stream::Weights);
    let n = set_size as f64;
    let counts = (0..members)
        .map(|_| {
            let mut hist = vec![0.0; grid.n_bins()];
            for _ in 0..set_size {
                hist[bins[rng.random_range(0..set_size)]] += 1.0;
            }
            let mut f: Vec<f64> = hist
                .iter()
                .zip(&center)
                .map(|(h, c)| (c + spread * (h / n - c)).max(0.0))
                .collect();
            let total: f64 = f.iter().sum();
            f.iter_mut().for_each(|v| *v /= total);
            f
        })
        .collect();
    BinEnsembleStats::from_frequencies(counts, set_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_probabilities_of_analytic_grid_are_uniform() {
        let spec = RingSpec::default();
        let grid = QuantileGrid::analytic(&spec, 7).unwrap();
        let p = bin_probabilities(&spec, &grid);
        assert_eq!(p.len(), 49);
        assert!(p.iter().all(|v| (v - 1.0 / 49.0).abs() < 1e-12));
    }

    #[test]
    fn calibrated_members_are_normalized() {
        let spec = RingSpec::default();
        let grid = QuantileGrid::analytic(&spec, 3).unwrap();
        let s = calibrated_ensemble(&spec, &grid, 20, 500, 2.0, 4).unwrap();
        for c in &s.counts {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|v| *v >= 0.0));
        }
        assert_eq!(s.n_members(), 20);
    }

    #[test]
    fn resampled_members_are_normalized() {
        let spec = RingSpec::default();
        let grid = QuantileGrid::analytic(&spec, 4).unwrap();
        let s = resampled_ensemble(&spec, &grid, 10, 300, 1.0, 2).unwrap();
        for c in &s.counts {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_members_differ() {
        let spec = RingSpec::default();
        let grid = QuantileGrid::analytic(&spec, 2).unwrap();
        let s = independent_ensemble(&spec, &grid, 3, 1000, 1).unwrap();
        assert_ne!(s.counts[0], s.counts[1]);
        assert!(s.std.iter().all(|v| *v > 0.0));
    }
}

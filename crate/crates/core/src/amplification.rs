//! Equivalent independent statistics from ensemble spreads.
//!
//! For bin `j` the ensemble mean `ḡ_j` and spread `σ_j` are matched to a
//! Poisson count with the same coefficient of variation, `t̂_j = ḡ_j² / σ_j²`.
//! `N̂ = Σ t̂_j` is the size of a truth sample with the same per-bin precision;
//! the amplification is `N̂ / N_train`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binning::{count_bins_absolute, BinEnsembleStats, QuantileGrid};
use crate::error::{Error, Result};
use crate::ring::{sample_ring, RingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinFlag {
    Ok,
    /// No member put anything in the bin.
    Empty,
    /// Members agree exactly; the bin carries no spread information.
    ZeroSpread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalentStats {
    /// Zero for flagged bins.
    pub t_hat: Vec<f64>,
    pub flags: Vec<BinFlag>,
}

impl EquivalentStats {
    pub fn n_hat(&self) -> f64 {
        self.t_hat.iter().sum()
    }

    pub fn n_excluded(&self) -> usize {
        self.flags.iter().filter(|f| **f != BinFlag::Ok).count()
    }
}

/// `t̂_j = ḡ_j² / σ_j²`; the ratio does not depend on whether frequencies or
/// absolute counts are used.
pub fn equivalent_stats(stats: &BinEnsembleStats) -> Result<EquivalentStats> {
    if stats.n_members() < 2 {
        return Err(Error::Degenerate(
            "equivalent statistics need at least two members".into(),
        ));
    }
    let mut t_hat = Vec::with_capacity(stats.n_bins());
    let mut flags = Vec::with_capacity(stats.n_bins());
    for (&m, &s) in stats.mean.iter().zip(&stats.std) {
        let (t, flag) = if m == 0.0 {
            (0.0, BinFlag::Empty)
        } else if s == 0.0 {
            (0.0, BinFlag::ZeroSpread)
        } else {
            ((m / s).powi(2), BinFlag::Ok)
        };
        t_hat.push(t);
        flags.push(flag);
    }
    let zero_spread = flags.iter().filter(|f| **f == BinFlag::ZeroSpread).count();
    if zero_spread > 0 {
        log::warn!("{zero_spread} bins without ensemble spread excluded from N̂");
    }
    Ok(EquivalentStats { t_hat, flags })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub n_q: usize,
    pub t_hat: Vec<f64>,
    pub n_hat: f64,
    pub amplification: f64,
    pub mean_per_bin: f64,
    pub excluded_bins: usize,
}

pub fn amplification_report(stats: &BinEnsembleStats, n_train: usize) -> Result<AmplificationReport> {
    if n_train == 0 {
        return Err(Error::config("training size must be positive"));
    }
    let eq = equivalent_stats(stats)?;
    let n_q = stats.n_bins();
    let n_hat = eq.n_hat();
    Ok(AmplificationReport {
        n_q,
        n_hat,
        amplification: n_hat / n_train as f64,
        mean_per_bin: n_hat / n_q as f64,
        excluded_bins: eq.n_excluded(),
        t_hat: eq.t_hat,
    })
}

/// One report per grid, in the order given.
pub fn amplification_curve(stats: &[&BinEnsembleStats], n_train: usize) -> Result<Vec<AmplificationReport>> {
    stats.iter().map(|s| amplification_report(s, n_train)).collect()
}

/// `n_q,n_hat,amplification,mean_per_bin`
pub fn write_amplification_csv(rows: &[AmplificationReport], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "n_q,n_hat,amplification,mean_per_bin").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e}",
            r.n_q, r.n_hat, r.amplification, r.mean_per_bin
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `y ≈ a′ · x^b` from least squares on `(log x, log y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a_prime: f64,
    pub b: f64,
    /// RMS of the log-space residuals.
    pub residual: f64,
}

pub fn fit_powerlaw(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Degenerate("power-law fit needs at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Degenerate("power-law fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("power-law fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    Ok(PowerLawFit {
        a_prime: a.exp(),
        b,
        residual: (ss / n).sqrt(),
    })
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Degenerate(format!("{name} has negative or NaN entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Degenerate(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, `0 · log(0 / ·) = 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            term(a, m) + term(b, m)
        })
        .sum();
    Ok(0.5 * sum)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Divergence of the ensemble-mean histogram from the equal-probability
/// truth, and of `repeats` fresh truth draws of size `round(n_hat)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureResult {
    pub n_q: usize,
    pub js_mean_pred: f64,
    pub js_equivalent: Vec<f64>,
}

/// Largest truth draw the closure check will generate.
pub const MAX_CLOSURE_DRAW: usize = 1_000_000_000;
const CLOSURE_CHUNK: usize = 1 << 20;

pub fn closure_check(
    stats: &BinEnsembleStats,
    n_hat: f64,
    grid: &QuantileGrid,
    spec: &RingSpec,
    truth_seed: u64,
    repeats: usize,
) -> Result<ClosureResult> {
    if !(n_hat >= 1.0) {
        return Err(Error::Degenerate(format!("closure needs N̂ ≥ 1, got {n_hat}")));
    }
    if repeats == 0 {
        return Err(Error::config("closure needs at least one truth draw"));
    }
    let n_q = grid.n_bins();
    if stats.n_bins() != n_q {
        return Err(Error::Shape {
            expected: n_q,
            got: stats.n_bins(),
        });
    }
    let q = uniform(n_q);
    let total: f64 = stats.mean.iter().sum();
    let p: Vec<f64> = stats.mean.iter().map(|m| m / total).collect();
    let js_mean_pred = js_divergence(&p, &q)?;
    if n_hat > MAX_CLOSURE_DRAW as f64 {
        return Err(Error::Degenerate(format!(
            "closure truth draw of N̂ = {n_hat:.3e} points exceeds {MAX_CLOSURE_DRAW}"
        )));
    }
    let size = n_hat.round() as usize;
    let js_equivalent = (0..repeats)
        .map(|k| {
            let seed = crate::rng::derive_seed(truth_seed, "closure", k as u64);
            let mut counts = vec![0u64; n_q];
            for (c, start) in (0..size).step_by(CLOSURE_CHUNK).enumerate() {
                let len = CLOSURE_CHUNK.min(size - start);
                let truth = sample_ring(spec, len, crate::rng::derive_seed(seed, "chunk", c as u64));
                for (acc, n) in counts.iter_mut().zip(count_bins_absolute(grid, &truth.points)) {
                    *acc += n;
                }
            }
            let freq: Vec<f64> = counts.iter().map(|&n| n as f64 / size as f64).collect();
            js_divergence(&freq, &q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosureResult {
        n_q,
        js_mean_pred,
        js_equivalent,
    })
}

/// One row of the closure table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureRow {
    pub n_q: usize,
    pub js_mean_pred: f64,
    pub js_equivalent: f64,
    pub js_equivalent_std: f64,
}

/// Sample mean and sample standard deviation (zero for a single value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates closure results of several runs on the same grid: the mean
/// prediction is averaged over runs, the equivalent-set divergence over all
/// truth draws with its sample standard deviation.
pub fn closure_row(results: &[ClosureResult]) -> Result<ClosureRow> {
    let Some(first) = results.first() else {
        return Err(Error::Degenerate("no closure results".into()));
    };
    let preds: Vec<f64> = results.iter().map(|r| r.js_mean_pred).collect();
    let eq: Vec<f64> = results.iter().flat_map(|r| r.js_equivalent.iter().copied()).collect();
    let (js_equivalent, js_equivalent_std) = mean_and_std(&eq);
    Ok(ClosureRow {
        n_q: first.n_q,
        js_mean_pred: mean_and_std(&preds).0,
        js_equivalent,
        js_equivalent_std,
    })
}

/// `n_q,js_mean_pred,js_equivalent,js_equivalent_std`
pub fn write_closure_csv(rows: &[ClosureRow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "n_q,js_mean_pred,js_equivalent,js_equivalent_std").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e}",
            r.n_q, r.js_mean_pred, r.js_equivalent, r.js_equivalent_std
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(counts: Vec<Vec<f64>>) -> BinEnsembleStats {
        BinEnsembleStats::from_frequencies(counts, 1).unwrap()
    }

    #[test]
    fn t_hat_special_cases() {
        // mean 2, population std 2
        let s = stats(vec![vec![0.0], vec![4.0]]);
        assert!((equivalent_stats(&s).unwrap().t_hat[0] - 1.0).abs() < 1e-15);
        // mean 9, std 3 = sqrt(mean)
        let s = stats(vec![vec![6.0], vec![12.0]]);
        assert!((equivalent_stats(&s).unwrap().t_hat[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bins_are_flagged() {
        let s = stats(vec![vec![0.0, 0.5, 0.5], vec![0.0, 0.5, 0.5]]);
        let eq = equivalent_stats(&s).unwrap();
        assert_eq!(eq.flags, vec![BinFlag::Empty, BinFlag::ZeroSpread, BinFlag::ZeroSpread]);
        assert_eq!(eq.n_hat(), 0.0);
        assert!(equivalent_stats(&stats(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn t_hat_is_scale_free() {
        let freq = vec![vec![0.1, 0.9], vec![0.3, 0.7], vec![0.2, 0.8]];
        let counts: Vec<Vec<f64>> = freq.iter().map(|c| c.iter().map(|v| v * 5000.0).collect()).collect();
        let a = equivalent_stats(&stats(freq)).unwrap();
        let b = equivalent_stats(&stats(counts)).unwrap();
        for (x, y) in a.t_hat.iter().zip(&b.t_hat) {
            assert!((x - y).abs() < 1e-9 * x);
        }
    }

    #[test]
    fn amplification_of_one() {
        let s = stats(vec![vec![0.0, 1.0], vec![4.0, 1.0]]);
        let r = amplification_report(&s, 1).unwrap();
        assert_eq!(r.n_hat, 1.0);
        assert_eq!(r.amplification, 1.0);
        assert_eq!(r.excluded_bins, 1);
    }

    #[test]
    fn powerlaw_examples() {
        let f = fit_powerlaw(&[(1.0, 2.0), (3.0, 6.0), (10.0, 20.0)]).unwrap();
        assert!((f.a_prime - 2.0).abs() < 1e-12 && (f.b - 1.0).abs() < 1e-12 && f.residual < 1e-12);
        let f = fit_powerlaw(&[(10.0, 1.0), (100.0, 10.0)]).unwrap();
        assert!((f.b - 1.0).abs() < 1e-12 && (f.a_prime - 0.1).abs() < 1e-12);
        assert!(fit_powerlaw(&[(1.0, 1.0)]).is_err());
        assert!(fit_powerlaw(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let disjoint = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - 2f64.ln()).abs() < 1e-15);
        let v = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.2158).abs() < 1e-4, "{v}");
        assert!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn closure_row_statistics() {
        let r = |p: f64, e: Vec<f64>| ClosureResult {
            n_q: 4,
            js_mean_pred: p,
            js_equivalent: e,
        };
        let row = closure_row(&[r(1.0, vec![2.0]), r(3.0, vec![4.0])]).unwrap();
        assert_eq!(row.js_mean_pred, 2.0);
        assert_eq!(row.js_equivalent, 3.0);
        assert!((row.js_equivalent_std - 2f64.sqrt()).abs() < 1e-15);
    }
}

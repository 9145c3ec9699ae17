//! Equal-probability polar quantile grids, ensemble bin statistics, empirical
//! CDF confidence intervals and empirical coverage.
//!
//! Bins are indexed `j = j_r · n + j_φ` for `n = n_per_dim`. A point belongs
//! to the bin whose lower edges are `≤` its coordinates (ties go up); radii
//! outside the outer edges are clamped into the first or last ring.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, SolverConfig};
use crate::net::Mlp;
use crate::posterior::PosteriorEnsemble;
use crate::ring::{polar_unchecked, RingSpec, SampleSet};
use crate::rng;

/// Smallest reference set accepted per radial quantile.
pub const MIN_REFERENCE_PER_EDGE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileGrid {
    pub n_per_dim: usize,
    pub radial_edges: Vec<f64>,
    pub angular_edges: Vec<f64>,
}

fn linear_angles(n: usize) -> Vec<f64> {
    (0..=n).map(|k| TAU * k as f64 / n as f64).collect()
}

fn check_increasing(edges: &[f64], what: &str) -> Result<()> {
    if edges.windows(2).all(|w| w[0] < w[1]) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("{what} edges are not strictly increasing")))
    }
}

impl QuantileGrid {
    /// Radial edges at the `k / n` empirical quantiles of the reference radii
    /// (outer edges at the sample extremes), angular edges linear.
    pub fn build(reference: &SampleSet, n_per_dim: usize) -> Result<Self> {
        let mut radii: Vec<f64> = reference.points.iter().map(|&p| polar_unchecked(p).0).collect();
        Self::from_radii(&mut radii, n_per_dim)
    }

    pub fn from_radii(radii: &mut [f64], n_per_dim: usize) -> Result<Self> {
        if n_per_dim == 0 {
            return Err(Error::config("n_per_dim must be positive"));
        }
        let m = radii.len();
        if m < MIN_REFERENCE_PER_EDGE * n_per_dim {
            return Err(Error::Degenerate(format!(
                "reference of {m} points is too small for {n_per_dim} radial quantiles"
            )));
        }
        radii.par_sort_unstable_by(f64::total_cmp);
        let mut radial_edges = Vec::with_capacity(n_per_dim + 1);
        radial_edges.push(radii[0]);
        for k in 1..n_per_dim {
            let i = k * m / n_per_dim;
            radial_edges.push(0.5 * (radii[i - 1] + radii[i]));
        }
        radial_edges.push(radii[m - 1]);
        check_increasing(&radial_edges, "radial")?;
        Ok(Self {
            n_per_dim,
            radial_edges,
            angular_edges: linear_angles(n_per_dim),
        })
    }

    /// Edges from the exact radial quantiles of the ring; the unbounded outer
    /// edge is stored as `f64::MAX`.
    pub fn analytic(spec: &RingSpec, n_per_dim: usize) -> Result<Self> {
        if n_per_dim == 0 {
            return Err(Error::config("n_per_dim must be positive"));
        }
        let radial_edges = (0..=n_per_dim)
            .map(|k| spec.radial_quantile(k as f64 / n_per_dim as f64).min(f64::MAX))
            .collect();
        Ok(Self {
            n_per_dim,
            radial_edges,
            angular_edges: linear_angles(n_per_dim),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_per_dim * self.n_per_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_per_dim;
        if n == 0 || self.radial_edges.len() != n + 1 || self.angular_edges.len() != n + 1 {
            return Err(Error::Degenerate("grid edge counts do not match n_per_dim".into()));
        }
        check_increasing(&self.radial_edges, "radial")?;
        check_increasing(&self.angular_edges, "angular")
    }

    #[inline]
    pub fn bin_of(&self, p: [f64; 2]) -> usize {
        let (r, phi) = polar_unchecked(p);
        let n = self.n_per_dim;
        let jr = self.radial_edges[1..n].partition_point(|&e| e <= r);
        let jp = self.angular_edges[1..n].partition_point(|&e| e <= phi);
        jr * n + jp
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }
}

pub fn count_bins_absolute(grid: &QuantileGrid, points: &[[f64; 2]]) -> Vec<u64> {
    let mut counts = vec![0u64; grid.n_bins()];
    for &p in points {
        counts[grid.bin_of(p)] += 1;
    }
    counts
}

/// Relative bin frequencies of `points`.
pub fn count_bins(grid: &QuantileGrid, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Degenerate("cannot bin an empty sample".into()));
    }
    let n = points.len() as f64;
    Ok(count_bins_absolute(grid, points)
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}

/// Per-member bin frequencies and their mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEnsembleStats {
    pub counts: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub set_size: usize,
}

impl BinEnsembleStats {
    pub fn from_frequencies(counts: Vec<Vec<f64>>, set_size: usize) -> Result<Self> {
        let Some(first) = counts.first() else {
            return Err(Error::Degenerate("no ensemble members".into()));
        };
        let n_bins = first.len();
        if let Some(bad) = counts.iter().find(|c| c.len() != n_bins) {
            return Err(Error::Shape {
                expected: n_bins,
                got: bad.len(),
            });
        }
        let m = counts.len() as f64;
        let mean: Vec<f64> = (0..n_bins)
            .map(|j| counts.iter().map(|c| c[j]).sum::<f64>() / m)
            .collect();
        let std = (0..n_bins)
            .map(|j| {
                let var = counts.iter().map(|c| (c[j] - mean[j]).powi(2)).sum::<f64>() / m;
                var.sqrt()
            })
            .collect();
        Ok(Self {
            counts,
            mean,
            std,
            set_size,
        })
    }

    /// Bins every member's generated set.
    pub fn from_sets(grid: &QuantileGrid, sets: &[&[[f64; 2]]]) -> Result<Self> {
        let set_size = sets.first().map_or(0, |s| s.len());
        if sets.iter().any(|s| s.len() != set_size) {
            return Err(Error::config("generated sets differ in size"));
        }
        let counts = sets
            .par_iter()
            .map(|s| count_bins(grid, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_frequencies(counts, set_size)
    }

    pub fn n_members(&self) -> usize {
        self.counts.len()
    }

    pub fn n_bins(&self) -> usize {
        self.mean.len()
    }

    /// Long format `member,bin,frequency`.
    pub fn write_member_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "member,bin,frequency").map_err(io)?;
        for (i, c) in self.counts.iter().enumerate() {
            for (j, f) in c.iter().enumerate() {
                writeln!(w, "{i},{j},{f:.16e}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads [`BinEnsembleStats::write_member_csv`] output back.
    pub fn read_member_csv(path: &Path, set_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("member,bin,frequency") {
            return Err(Error::format(path, "expected header `member,bin,frequency`"));
        }
        let mut counts: Vec<Vec<f64>> = Vec::new();
        for (row, line) in lines.enumerate() {
            let bad = || Error::format(path, format!("bad row {}", row + 2));
            let mut f = line.split(',');
            let i: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let j: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v: f64 = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if i == counts.len() {
                counts.push(Vec::new());
            }
            if i + 1 != counts.len() || j != counts[i].len() {
                return Err(bad());
            }
            counts[i].push(v);
        }
        Self::from_frequencies(counts, set_size)
    }
}

/// How latent points are shared between ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Every member pushes forward the same latent draws.
    #[default]
    Shared,
    /// Each member draws its own latents.
    Independent,
}

/// `set_size` generated points per member.
pub fn generate_member_sets(
    mlp: &Mlp,
    ensemble: &PosteriorEnsemble,
    set_size: usize,
    seed: u64,
    solver: &SolverConfig,
    mode: LatentMode,
) -> Result<Vec<Vec<[f64; 2]>>> {
    if set_size == 0 {
        return Err(Error::config("set_size must be positive"));
    }
    let shared = match mode {
        LatentMode::Shared => Some(flow::draw_latents(set_size, seed)),
        LatentMode::Independent => None,
    };
    ensemble
        .members
        .iter()
        .enumerate()
        .map(|(i, theta)| {
            let latents = match &shared {
                Some(l) => std::borrow::Cow::Borrowed(l),
                None => {
                    std::borrow::Cow::Owned(flow::draw_latents(set_size, rng::derive_seed(seed, "member", i as u64)))
                }
            };
            flow::push_forward(mlp, theta, &latents, solver)
        })
        .collect()
}

pub fn ensemble_stats(
    mlp: &Mlp,
    grid: &QuantileGrid,
    ensemble: &PosteriorEnsemble,
    set_size: usize,
    seed: u64,
    solver: &SolverConfig,
    mode: LatentMode,
) -> Result<BinEnsembleStats> {
    let sets = generate_member_sets(mlp, ensemble, set_size, seed, solver, mode)?;
    let views: Vec<&[[f64; 2]]> = sets.iter().map(Vec::as_slice).collect();
    BinEnsembleStats::from_sets(grid, &views)
}

/// Empirical-CDF quantile with plotting positions `(i - 0.5) / n` and linear
/// interpolation, clamped to the extremes. `sorted` must be ascending.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let x = p * n as f64 + 0.5;
    if x <= 1.0 {
        return sorted[0];
    }
    if x >= n as f64 {
        return sorted[n - 1];
    }
    let i = x.floor();
    let frac = x - i;
    let i = i as usize;
    sorted[i - 1] + frac * (sorted[i] - sorted[i - 1])
}

/// Symmetric interval `[F̂⁻¹(0.5 - c/2), F̂⁻¹(0.5 + c/2)]`.
pub fn confidence_interval(values: &[f64], c: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Degenerate(
            "confidence interval needs at least two values".into(),
        ));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::config("nominal coverage must lie in [0, 1]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(interval_sorted(&sorted, c))
}

fn interval_sorted(sorted: &[f64], c: f64) -> (f64, f64) {
    (
        empirical_quantile(sorted, 0.5 - 0.5 * c),
        empirical_quantile(sorted, 0.5 + 0.5 * c),
    )
}

/// `n` linearly spaced values in `[0, 1]`, endpoints included.
pub fn nominal_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub n_per_dim: usize,
    pub runs: usize,
    pub nominal: Vec<f64>,
    /// `per_bin[c][j]`
    pub per_bin: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// `marginal_r[c][j_r]`
    pub marginal_r: Vec<Vec<f64>>,
    /// `marginal_phi[c][j_φ]`
    pub marginal_phi: Vec<Vec<f64>>,
}

/// Fraction of runs whose interval at each nominal level contains `1/n_Q`.
pub fn coverage(runs: &[BinEnsembleStats], grid: &QuantileGrid, nominal: &[f64]) -> Result<CoverageCurve> {
    if runs.len() < 2 {
        return Err(Error::Degenerate("coverage needs at least two runs".into()));
    }
    let n_bins = grid.n_bins();
    if let Some(bad) = runs.iter().find(|r| r.n_bins() != n_bins) {
        return Err(Error::Shape {
            expected: n_bins,
            got: bad.n_bins(),
        });
    }
    if nominal.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::config("nominal coverage must lie in [0, 1]"));
    }
    if let Some(r) = runs.iter().find(|r| r.n_members() < 2) {
        return Err(Error::Degenerate(format!(
            "coverage needs at least two members per run, got {}",
            r.n_members()
        )));
    }
    let truth = 1.0 / n_bins as f64;
    // sorted member values per run and bin
    let sorted: Vec<Vec<Vec<f64>>> = runs
        .iter()
        .map(|run| {
            (0..n_bins)
                .map(|j| {
                    let mut v: Vec<f64> = run.counts.iter().map(|c| c[j]).collect();
                    v.sort_unstable_by(f64::total_cmp);
                    v
                })
                .collect()
        })
        .collect();
    let s = runs.len() as f64;
    let n = grid.n_per_dim;
    let mut per_bin = Vec::with_capacity(nominal.len());
    let mut mean = Vec::with_capacity(nominal.len());
    let mut marginal_r = Vec::with_capacity(nominal.len());
    let mut marginal_phi = Vec::with_capacity(nominal.len());
    for &c in nominal {
        let row: Vec<f64> = (0..n_bins)
            .map(|j| {
                let hits = sorted
                    .iter()
                    .filter(|run| {
                        let (lo, hi) = interval_sorted(&run[j], c);
                        lo <= truth && truth <= hi
                    })
                    .count();
                hits as f64 / s
            })
            .collect();
        mean.push(row.iter().sum::<f64>() / n_bins as f64);
        marginal_r.push(
            (0..n)
                .map(|jr| (0..n).map(|jp| row[jr * n + jp]).sum::<f64>() / n as f64)
                .collect(),
        );
        marginal_phi.push(
            (0..n)
                .map(|jp| (0..n).map(|jr| row[jr * n + jp]).sum::<f64>() / n as f64)
                .collect(),
        );
        per_bin.push(row);
    }
    Ok(CoverageCurve {
        n_per_dim: n,
        runs: runs.len(),
        nominal: nominal.to_vec(),
        per_bin,
        mean,
        marginal_r,
        marginal_phi,
    })
}

impl CoverageCurve {
    /// `nominal,mean,marginal_r_<jr>...,marginal_phi_<jphi>...`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let n = self.n_per_dim;
        let mut header = String::from("nominal,mean");
        for jr in 0..n {
            header.push_str(&format!(",marginal_r_{jr}"));
        }
        for jp in 0..n {
            header.push_str(&format!(",marginal_phi_{jp}"));
        }
        writeln!(w, "{header}").map_err(io)?;
        for (i, c) in self.nominal.iter().enumerate() {
            let mut line = format!("{c:.16e},{:.16e}", self.mean[i]);
            for v in self.marginal_r[i].iter().chain(&self.marginal_phi[i]) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub md: f64,
    pub mad: f64,
    pub mad_r: f64,
    pub mad_phi: f64,
}

fn marginal_mad(nominal: &[f64], marginal: &[Vec<f64>]) -> f64 {
    let n = marginal.first().map_or(0, Vec::len);
    let per_index = (0..n).map(|k| {
        nominal
            .iter()
            .zip(marginal)
            .map(|(c, row)| (row[k] - c).abs())
            .sum::<f64>()
            / nominal.len() as f64
    });
    per_index.sum::<f64>() / n as f64
}

pub fn deviation(curve: &CoverageCurve) -> Deviation {
    let m = curve.nominal.len() as f64;
    let diffs = curve.mean.iter().zip(&curve.nominal).map(|(a, c)| a - c);
    Deviation {
        md: diffs.clone().sum::<f64>() / m,
        mad: diffs.map(f64::abs).sum::<f64>() / m,
        mad_r: marginal_mad(&curve.nominal, &curve.marginal_r),
        mad_phi: marginal_mad(&curve.nominal, &curve.marginal_phi),
    }
}

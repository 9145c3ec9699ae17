//! The gamma ring: `φ ~ U(0, 2π)`, `r - r0 ~ Gamma(α, β)`, returned in
//! Cartesian coordinates.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingSpec {
    pub inner_radius: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            inner_radius: 4.0,
            gamma_shape: 2.0,
            gamma_rate: 2.0,
        }
    }
}

impl RingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_radius > 0.0) {
            return Err(Error::config("inner_radius must be positive"));
        }
        if !(self.gamma_rate > 0.0) {
            return Err(Error::config("gamma_rate must be positive"));
        }
        // the sampler draws a sum of exponentials
        if self.gamma_shape != 2.0 {
            return Err(Error::config("only gamma_shape = 2 is supported"));
        }
        Ok(())
    }

    pub fn mean_radius(&self) -> f64 {
        self.inner_radius + self.gamma_shape / self.gamma_rate
    }

    /// CDF of the radius. Closed form of the Gamma(2, β) CDF shifted by the
    /// inner radius; zero below the edge.
    pub fn radial_cdf(&self, r: f64) -> f64 {
        let u = r - self.inner_radius;
        if u <= 0.0 {
            return 0.0;
        }
        if u.is_infinite() {
            return 1.0;
        }
        let bu = self.gamma_rate * u;
        -(-bu).exp_m1() - bu * (-bu).exp()
    }

    /// Inverse of [`RingSpec::radial_cdf`] by bisection.
    pub fn radial_quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.inner_radius;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let mut lo = self.inner_radius;
        let mut hi = self.inner_radius + 1.0 / self.gamma_rate;
        while self.radial_cdf(hi) < p {
            hi = self.inner_radius + 2.0 * (hi - self.inner_radius);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.radial_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// A set of 2D points with the seed that produced it (0 for loaded sets).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<[f64; 2]>,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(points: Vec<[f64; 2]>, seed: u64) -> Self {
        Self { points, seed }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Header `x,y`, one point per row, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "x,y").map_err(io)?;
        for p in &self.points {
            writeln!(w, "{:.16e},{:.16e}", p[0], p[1]).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "x,y" => {}
            Some(Err(e)) => return Err(Error::io(path, e)),
            _ => return Err(Error::format(path, "expected header `x,y`")),
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = || -> Result<f64> {
                fields
                    .next()
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad row {}", i + 2)))
            };
            let p = [next()?, next()?];
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::format(path, format!("non-finite row {}", i + 2)));
            }
            points.push(p);
        }
        Ok(Self { points, seed: 0 })
    }
}

pub fn sample_ring(spec: &RingSpec, n: usize, seed: u64) -> SampleSet {
    let mut rng = rng::stream(seed, Stream::Data);
    let beta = spec.gamma_rate;
    let points = (0..n)
        .map(|_| {
            let phi = rng.random::<f64>() * TAU;
            let e1: f64 = Exp1.sample(&mut rng);
            let e2: f64 = Exp1.sample(&mut rng);
            let r = spec.inner_radius + (e1 + e2) / beta;
            to_cartesian(r, phi)
        })
        .collect();
    SampleSet { points, seed }
}

pub fn to_cartesian(r: f64, phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [r * c, r * s]
}

/// Radius and angle counterclockwise from `+x`, wrapped to `[0, 2π)`.
pub fn to_polar(p: [f64; 2]) -> Result<(f64, f64)> {
    let r = p[0].hypot(p[1]);
    if r == 0.0 {
        return Err(Error::Degenerate("polar angle undefined at the origin".into()));
    }
    Ok((r, wrap_angle(p[1].atan2(p[0]))))
}

/// Polar coordinates without the origin check; the origin maps to `(0, 0)`.
#[inline]
pub(crate) fn polar_unchecked(p: [f64; 2]) -> (f64, f64) {
    (p[0].hypot(p[1]), wrap_angle(p[1].atan2(p[0])))
}

#[inline]
fn wrap_angle(phi: f64) -> f64 {
    let wrapped = if phi < 0.0 { phi + TAU } else { phi };
    // -0.0 and tiny negatives can round up to exactly 2π
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

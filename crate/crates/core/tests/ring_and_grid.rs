use bayesamp::binning::{self, QuantileGrid};
use bayesamp::ring::{sample_ring, to_cartesian, to_polar, RingSpec};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn radius_follows_shifted_gamma() {
    let spec = RingSpec::default();
    let set = sample_ring(&spec, 100_000, 11);
    let radii: Vec<f64> = set.points.iter().map(|&p| to_polar(p).unwrap().0).collect();
    let d = ks_statistic(radii, |r| spec.radial_cdf(r));
    // 0.1% critical value of the KS statistic
    assert!(d < 1.95 / (100_000f64).sqrt(), "KS distance {d}");
}

#[test]
fn angle_is_uniform() {
    let set = sample_ring(&RingSpec::default(), 100_000, 12);
    let bins = 36;
    let mut counts = vec![0.0; bins];
    for &p in &set.points {
        let phi = to_polar(p).unwrap().1;
        let j = ((phi / std::f64::consts::TAU) * bins as f64) as usize;
        counts[j.min(bins - 1)] += 1.0;
    }
    let expected = set.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn samples_stay_outside_inner_radius() {
    let spec = RingSpec::default();
    let set = sample_ring(&spec, 20_000, 13);
    assert!(set.points.iter().all(|&p| to_polar(p).unwrap().0 >= spec.inner_radius));
    let mean: f64 = set.points.iter().map(|&p| to_polar(p).unwrap().0).sum::<f64>() / set.len() as f64;
    assert!((mean - spec.mean_radius()).abs() < 0.01, "mean radius {mean}");
}

#[test]
fn quantile_grid_bins_are_equally_likely() {
    let spec = RingSpec::default();
    let grid = QuantileGrid::build(&sample_ring(&spec, 1_000_000, 21), 5).unwrap();
    let test = sample_ring(&spec, 250_000, 22);
    let counts = binning::count_bins_absolute(&grid, &test.points);
    let expected = test.len() as f64 / 25.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new(24.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn two_bin_grid_splits_at_the_median_radius() {
    let spec = RingSpec::default();
    let grid = QuantileGrid::build(&sample_ring(&spec, 1_000_000, 23), 2).unwrap();
    let median = spec.radial_quantile(0.5);
    assert!(
        (grid.radial_edges[1] - median).abs() < 5e-3,
        "{} vs {median}",
        grid.radial_edges[1]
    );
    assert!((grid.angular_edges[1] - std::f64::consts::PI).abs() < 1e-12);
}

#[test]
fn empirical_grid_approaches_analytic_grid() {
    let spec = RingSpec::default();
    let empirical = QuantileGrid::build(&sample_ring(&spec, 1_000_000, 24), 10).unwrap();
    let analytic = QuantileGrid::analytic(&spec, 10).unwrap();
    for k in 1..10 {
        let (e, a) = (empirical.radial_edges[k], analytic.radial_edges[k]);
        assert!((e - a).abs() < 0.01, "edge {k}: {e} vs {a}");
    }
}

#[test]
fn reference_too_small_for_grid_is_rejected() {
    let set = sample_ring(&RingSpec::default(), 999, 1);
    assert!(QuantileGrid::build(&set, 10).is_err());
}

proptest! {
    #[test]
    fn polar_round_trip(r in 0.1f64..50.0, phi in 0.0f64..std::f64::consts::TAU) {
        let (r2, phi2) = to_polar(to_cartesian(r, phi)).unwrap();
        prop_assert!((r2 - r).abs() < 1e-12 * r.max(1.0));
        let dphi = (phi2 - phi).abs();
        prop_assert!(dphi < 1e-10 || (std::f64::consts::TAU - dphi) < 1e-10);
    }

    #[test]
    fn every_point_lands_in_a_bin(n in 1usize..12, x in -30.0f64..30.0, y in -30.0f64..30.0) {
        let grid = QuantileGrid::analytic(&RingSpec::default(), n).unwrap();
        prop_assert!(grid.bin_of([x, y]) < grid.n_bins());
    }

    #[test]
    fn bin_index_is_monotone_in_radius(n in 2usize..12, phi in 0.0f64..6.2, r1 in 0.0f64..20.0, dr in 0.0f64..5.0) {
        let grid = QuantileGrid::analytic(&RingSpec::default(), n).unwrap();
        let b1 = grid.bin_of(to_cartesian(r1, phi)) / n;
        let b2 = grid.bin_of(to_cartesian(r1 + dr, phi)) / n;
        prop_assert!(b2 >= b1);
    }

    #[test]
    fn radial_quantile_inverts_cdf(p in 0.001f64..0.999) {
        let spec = RingSpec::default();
        prop_assert!((spec.radial_cdf(spec.radial_quantile(p)) - p).abs() < 1e-12);
    }
}

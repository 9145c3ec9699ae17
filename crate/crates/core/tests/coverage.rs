use bayesamp::binning::{self, BinEnsembleStats, QuantileGrid};
use bayesamp::ring::RingSpec;
use bayesamp::synthetic::calibrated_ensemble;
use proptest::prelude::*;

fn synthetic_runs(
    n: usize,
    runs: usize,
    members: usize,
    spread: f64,
    seed: u64,
) -> (QuantileGrid, Vec<BinEnsembleStats>) {
    let spec = RingSpec::default();
    let grid = QuantileGrid::analytic(&spec, n).unwrap();
    let stats = (0..runs)
        .map(|r| calibrated_ensemble(&spec, &grid, members, 2000, spread, seed * 1000 + r as u64).unwrap())
        .collect();
    (grid, stats)
}

#[test]
fn calibrated_ensembles_track_the_diagonal() {
    let (grid, runs) = synthetic_runs(4, 60, 100, 1.0, 1);
    let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(50)).unwrap();
    let worst = curve
        .mean
        .iter()
        .zip(&curve.nominal)
        .map(|(a, c)| (a - c).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "largest deviation {worst}");
    assert!(binning::deviation(&curve).mad < 0.02);
}

#[test]
fn overdispersed_ensembles_overcover() {
    let (grid, runs) = synthetic_runs(3, 40, 50, 2.0, 2);
    let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(21)).unwrap();
    let d = binning::deviation(&curve);
    assert!(d.md > 0.1, "md {}", d.md);
    assert!(curve.mean[10] > 0.75, "coverage at c=0.5 is {}", curve.mean[10]);
}

#[test]
fn five_runs_give_six_coverage_levels() {
    let (grid, runs) = synthetic_runs(5, 5, 50, 1.0, 3);
    let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(50)).unwrap();
    let mut seen = [false; 6];
    for row in &curve.per_bin {
        for &v in row {
            let k = (v * 5.0).round();
            assert!((v * 5.0 - k).abs() < 1e-12, "coverage {v} is not a multiple of 1/5");
            seen[k as usize] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "levels seen: {seen:?}");
}

#[test]
fn marginals_average_to_the_mean_curve() {
    let (grid, runs) = synthetic_runs(6, 8, 30, 1.0, 4);
    let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(11)).unwrap();
    for c in 0..curve.nominal.len() {
        let r: f64 = curve.marginal_r[c].iter().sum::<f64>() / 6.0;
        let phi: f64 = curve.marginal_phi[c].iter().sum::<f64>() / 6.0;
        assert!((r - curve.mean[c]).abs() < 1e-12);
        assert!((phi - curve.mean[c]).abs() < 1e-12);
    }
}

#[test]
fn coverage_curve_csv_has_one_row_per_level() {
    let (grid, runs) = synthetic_runs(2, 3, 10, 1.0, 5);
    let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("coverage.csv");
    curve.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "nominal,mean,marginal_r_0,marginal_r_1,marginal_phi_0,marginal_phi_1"
    );
    assert_eq!(lines.count(), 7);
}

#[test]
fn single_run_is_rejected() {
    let (grid, runs) = synthetic_runs(2, 1, 10, 1.0, 6);
    assert!(binning::coverage(&runs, &grid, &[0.5]).is_err());
}

proptest! {
    #[test]
    fn intervals_are_nested(values in prop::collection::vec(-10.0f64..10.0, 2..60), c1 in 0.0f64..1.0, c2 in 0.0f64..1.0) {
        let (small, large) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let (a, b) = binning::confidence_interval(&values, small).unwrap();
        let (lo, hi) = binning::confidence_interval(&values, large).unwrap();
        prop_assert!(lo <= a && a <= b && b <= hi);
    }

    #[test]
    fn full_interval_spans_the_sample(values in prop::collection::vec(-10.0f64..10.0, 2..60)) {
        let (lo, hi) = binning::confidence_interval(&values, 1.0).unwrap();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!((lo, hi), (min, max));
    }

    #[test]
    fn coverage_is_monotone_in_nominal(seed in 0u64..1000) {
        let (grid, runs) = synthetic_runs(2, 3, 8, 1.0, seed);
        let curve = binning::coverage(&runs, &grid, &binning::nominal_grid(11)).unwrap();
        for w in curve.mean.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }
}

mod common;

use bayesamp::flow::{self, SolverConfig};
use bayesamp::net::{Mlp, NetConfig};
use nalgebra::Matrix2;

fn linear_mlp() -> Mlp {
    Mlp::new(&NetConfig::default()).unwrap()
}

#[test]
fn linear_field_likelihood_is_exact() {
    let mlp = linear_mlp();
    let a = Matrix2::new(0.3, -0.4, 0.2, -0.5);
    // row-major copy of `a`
    let theta = mlp.affine_field(&[0.3, -0.4, 0.2, -0.5], 50.0).unwrap();
    let inverse_flow = (-a).exp();
    let solver = SolverConfig::rk4(100);
    let mut rng = common::rng(1);
    for _ in 0..20 {
        let x = common::random_point(&mut rng, 4.0);
        let z = inverse_flow * nalgebra::Vector2::new(x[0], x[1]);
        let expected = -0.5 * z.norm_squared() - (2.0 * std::f64::consts::PI).ln() - a.trace();
        let got = flow::log_likelihood(&mlp, &theta, x, &solver).unwrap();
        assert!((got.log_p - expected).abs() < 1e-6, "{} vs {expected}", got.log_p);
        assert!((got.latent_point[0] - z[0]).abs() < 1e-9);
        assert!((got.trace_integral - a.trace()).abs() < 1e-9);
    }
}

#[test]
fn generation_inverts_likelihood_latent() {
    let mlp = Mlp::new(&common::small_config()).unwrap();
    let theta = common::random_params(&mlp, &mut common::rng(2));
    let solver = SolverConfig::rk4(40);
    let latents = flow::draw_latents(50, 9);
    let points = flow::push_forward(&mlp, &theta, &latents, &solver).unwrap();
    for (z, x) in latents.iter().zip(&points) {
        let back = flow::log_likelihood(&mlp, &theta, *x, &solver).unwrap().latent_point;
        assert!((back[0] - z[0]).abs() < 1e-6 && (back[1] - z[1]).abs() < 1e-6);
    }
}

#[test]
fn rk4_error_shrinks_with_fourth_order() {
    let mlp = linear_mlp();
    let a = Matrix2::new(1.2, -1.5, 0.8, -0.9);
    let theta = mlp.affine_field(&[1.2, -1.5, 0.8, -0.9], 50.0).unwrap();
    let x = [0.7, -1.1];
    let exact = (-a).exp() * nalgebra::Vector2::new(x[0], x[1]);
    let err = |n| {
        let z = flow::log_likelihood(&mlp, &theta, x, &SolverConfig::rk4(n))
            .unwrap()
            .latent_point;
        (z[0] - exact[0]).hypot(z[1] - exact[1])
    };
    for n in [4, 8] {
        let ratio = err(n) / err(2 * n);
        assert!((13.0..19.0).contains(&ratio), "error ratio {ratio} at n = {n}");
    }
}

#[test]
fn random_network_density_integrates_to_one() {
    let mlp = Mlp::new(&common::small_config()).unwrap();
    let theta = common::random_params(&mlp, &mut common::rng(4));
    let (n, half) = (200, 10.0);
    let h = 2.0 * half / n as f64;
    let points: Vec<[f64; 2]> = (0..n * n)
        .map(|k| {
            [
                -half + (k / n) as f64 * h + 0.5 * h,
                -half + (k % n) as f64 * h + 0.5 * h,
            ]
        })
        .collect();
    let logp = flow::log_likelihood_batch(&mlp, &theta, &points, &SolverConfig::rk4(10)).unwrap();
    let mass: f64 = logp.iter().map(|l| l.exp()).sum::<f64>() * h * h;
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn generate_is_reproducible() {
    let mlp = Mlp::new(&common::small_config()).unwrap();
    let theta = mlp.init_params(5);
    let a = flow::generate(&mlp, &theta, 100, 77, &SolverConfig::rk4(8)).unwrap();
    let b = flow::generate(&mlp, &theta, 100, 77, &SolverConfig::rk4(8)).unwrap();
    assert_eq!(a.points, b.points);
}

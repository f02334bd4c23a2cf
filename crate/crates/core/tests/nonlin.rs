use std::f64::consts::PI;

use ntk_limits::fc_kernel::rho_grid;
use ntk_limits::nonlin::{Nonlinearity, NonlinearitySpec, Regime};
use ntk_limits::Error;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn gaussian_moments() {
    close(Nonlinearity::relu().gaussian_moment(2).unwrap(), 0.5, 1e-12);
    close(Nonlinearity::standardized_relu().gaussian_moment(2).unwrap(), 1.0, 1e-12);
    close(Nonlinearity::identity().gaussian_moment(1).unwrap(), 0.0, 1e-12);
}

#[test]
fn standardize_examples() {
    let s = Nonlinearity::relu().standardize().unwrap();
    close(s.scale(), 2f64.sqrt(), 1e-12);
    close(s.gaussian_moment(2).unwrap(), 1.0, 1e-10);
    let again = s.standardize().unwrap();
    close(again.scale(), s.scale(), 1e-12);
    let id = Nonlinearity::identity().affine(3.0, 0.0).standardize().unwrap();
    close(id.scale(), 1.0, 1e-12);
    let zero = Nonlinearity::identity().affine(0.0, 0.0);
    assert!(zero.standardize().is_err());
}

#[test]
fn normalize_examples() {
    let n = Nonlinearity::relu().normalize().unwrap();
    let mean = 1.0 / (2.0 * PI).sqrt();
    let sd = (0.5 - 1.0 / (2.0 * PI)).sqrt();
    for x in [-2.0, -0.1, 0.0, 0.3, 1.7] {
        close(n.eval(x), (f64::max(x, 0.0) - mean) / sd, 1e-10);
    }
    close(n.gaussian_moment(1).unwrap(), 0.0, 1e-10);
    close(n.gaussian_moment(2).unwrap(), 1.0, 1e-10);
    let twice = n.normalize().unwrap();
    close(twice.scale(), n.scale(), 1e-9);
    close(twice.shift(), n.shift(), 1e-9);
    let id = Nonlinearity::identity().normalize().unwrap();
    close(id.scale(), 1.0, 1e-12);
    close(id.shift(), 0.0, 1e-12);
    assert!(Nonlinearity::identity().affine(0.0, 2.0).normalize().is_err());
}

#[test]
fn relu_dual_values() {
    let s = Nonlinearity::standardized_relu();
    close(s.dual(1.0).unwrap(), 1.0, 1e-12);
    close(s.dual(0.0).unwrap(), 1.0 / PI, 1e-12);
    close(s.dual(-1.0).unwrap(), 0.0, 1e-12);
    close(s.dual_derivative(0.0).unwrap(), 0.5, 1e-12);
    close(s.dual_derivative(1.0).unwrap(), 1.0, 1e-12);
    close(s.dual_derivative(-1.0).unwrap(), 0.0, 1e-12);
    assert!(matches!(s.dual(1.5), Err(Error::Domain(_))));
}

#[test]
fn relu_closed_form_matches_quadrature() {
    for s in [
        Nonlinearity::relu(),
        Nonlinearity::standardized_relu(),
        Nonlinearity::normalized_relu(),
    ] {
        for rho in rho_grid(201) {
            close(s.dual(rho).unwrap(), s.dual_by_quadrature(rho).unwrap(), 1e-6);
            close(
                s.dual_derivative(rho).unwrap(),
                s.dual_derivative_by_quadrature(rho).unwrap(),
                1e-6,
            );
        }
    }
}

#[test]
fn hermite_series_matches_quadrature() {
    let h = Nonlinearity::hermite_series(vec![0.1, 0.7, -0.3, 0.2]).unwrap();
    for rho in rho_grid(41) {
        close(h.dual(rho).unwrap(), h.dual_by_quadrature(rho).unwrap(), 1e-6);
        close(
            h.dual_derivative(rho).unwrap(),
            h.dual_derivative_by_quadrature(rho).unwrap(),
            1e-6,
        );
    }
}

#[test]
fn characteristic_values() {
    let s = Nonlinearity::standardized_relu();
    close(s.characteristic_value(0.1).unwrap(), 0.99, 1e-12);
    close(s.characteristic_value(0.0).unwrap(), 1.0, 1e-12);
    let n = Nonlinearity::normalized_relu();
    close(n.characteristic_value(0.0).unwrap(), PI / (PI - 1.0), 1e-10);
}

#[test]
fn fixed_points() {
    let s = Nonlinearity::standardized_relu();
    assert_eq!(s.fixed_point(0.1).unwrap(), None);
    assert_eq!(Nonlinearity::identity().fixed_point(0.5).unwrap(), None);
    let n = Nonlinearity::normalized_relu();
    let a = n.fixed_point(0.0).unwrap().unwrap();
    assert!((0.0..1.0).contains(&a));
    assert!((n.dual(a).unwrap() - a).abs() <= 1e-12);
    let a = n.fixed_point(0.1).unwrap().unwrap();
    assert!((0.01 + 0.99 * n.dual(a).unwrap() - a).abs() <= 1e-12);
    assert!(matches!(
        Nonlinearity::relu().fixed_point(0.1),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn classify_examples() {
    let s = Nonlinearity::standardized_relu();
    let rep = s.classify(0.5).unwrap();
    assert_eq!(rep.regime, Regime::Order);
    close(rep.r, 0.75, 1e-12);
    assert_eq!(s.classify(0.0).unwrap().regime, Regime::Edge);
    let rep = Nonlinearity::normalized_relu().classify(0.1).unwrap();
    assert_eq!(rep.regime, Regime::Chaos);
    assert!(rep.fixed_point.is_some());
    let table = Nonlinearity::tabulate(|x| x.tanh(), 10.0, 2001).unwrap();
    let rep = table.standardize().unwrap().classify(0.1).unwrap();
    assert!(rep.notes.iter().any(|n| n.contains("bounds not guaranteed")));
}

#[test]
fn duals_bounded_by_value_at_one() {
    let family = [
        Nonlinearity::standardized_relu(),
        Nonlinearity::normalized_relu(),
        Nonlinearity::hermite_series(vec![0.2, 0.5, 0.4, 0.1]).unwrap(),
        Nonlinearity::tabulate(|x| x.tanh(), 10.0, 2001).unwrap(),
    ];
    for s in &family {
        let r1 = s.dual(1.0).unwrap();
        let d1 = s.dual_derivative(1.0).unwrap();
        for rho in rho_grid(41) {
            assert!(s.dual(rho).unwrap().abs() <= r1 + 1e-9, "{} at {rho}", s.kind());
            assert!(s.dual_derivative(rho).unwrap().abs() <= d1 + 1e-9);
        }
    }
}

#[test]
fn standardized_dual_shape() {
    for s in [
        Nonlinearity::standardized_relu(),
        Nonlinearity::normalized_relu(),
        Nonlinearity::tabulate(|x| x.tanh(), 10.0, 4001)
            .unwrap()
            .standardize()
            .unwrap(),
    ] {
        let grid = rho_grid(101);
        for w in grid.windows(3).filter(|w| w[0] >= 0.0 && w[2] < 1.0) {
            let (a, b, c) = (
                s.dual(w[0]).unwrap(),
                s.dual(w[1]).unwrap(),
                s.dual(w[2]).unwrap(),
            );
            assert!(a + c - 2.0 * b >= -1e-9, "convexity at {}", w[1]);
        }
        for rho in grid.iter().filter(|r| **r > -1.0 && **r < 0.0) {
            assert!(s.dual(*rho).unwrap() > *rho);
        }
    }
}

#[test]
fn normalized_nonlinearities_amplify_derivatives() {
    let family = [
        Nonlinearity::normalized_relu(),
        Nonlinearity::tabulate(|x| x.tanh(), 10.0, 4001)
            .unwrap()
            .normalize()
            .unwrap(),
        Nonlinearity::tabulate(|x| x.powi(3), 10.0, 4001)
            .unwrap()
            .normalize()
            .unwrap(),
    ];
    for s in &family {
        assert!(s.derivative_second_moment().unwrap() > 1.0);
    }
}

#[test]
fn spec_round_trip_through_json() {
    let text = r#"{"kind": "relu", "normalization": "standardized"}"#;
    let spec: NonlinearitySpec = serde_json::from_str(text).unwrap();
    let s = spec.build().unwrap();
    close(s.gaussian_moment(2).unwrap(), 1.0, 1e-12);
    let back: NonlinearitySpec =
        serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn table_coverage_is_checked() {
    assert!(Nonlinearity::tabulate(|x| x, 2.0, 11).is_err());
    assert!(Nonlinearity::tabulated(vec![0.0, 0.0, 1.0], vec![0.0; 3]).is_err());
}

/// Composite Simpson on [-12, 12] against the standard normal density.
fn simpson_gauss(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / n as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (0..=n)
        .map(|i| {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * f(x) * phi(x)
        })
        .sum::<f64>()
        * h
        / 3.0
}

#[test]
fn tanh_duals_match_simpson() {
    let t = Nonlinearity::tanh();
    let m2 = simpson_gauss(|x| x.tanh().powi(2), 4000);
    assert!((t.dual(1.0).unwrap() - m2).abs() < 1e-10, "{} vs {m2}", t.dual(1.0).unwrap());
    assert!(t.dual(0.0).unwrap().abs() < 1e-12);
    let d1 = simpson_gauss(|x| 1.0 - x.tanh().powi(2), 4000);
    assert!((t.dual_derivative(0.0).unwrap() - d1 * d1).abs() < 1e-10);
    for rho in [0.5f64, -0.3] {
        let c = (1.0 - rho * rho).sqrt();
        let outer = simpson_gauss(
            |x| x.tanh() * simpson_gauss(|y| (rho * x + c * y).tanh(), 600),
            600,
        );
        assert!((t.dual(rho).unwrap() - outer).abs() < 1e-8, "{rho}");
    }
    let s = t.standardize().unwrap();
    assert!((s.dual(1.0).unwrap() - 1.0).abs() < 1e-10);
    assert!(s.is_differentiable());
    assert!(s.characteristic_value(0.1).unwrap() > 1.0);
}

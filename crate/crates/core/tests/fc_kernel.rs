use ntk_limits::fc_kernel::{
    bound_check_chaos, bound_check_order, default_rho_grid, overlap, rho_grid,
    sigma_bound_check, FcArchitecture, OrderBoundKind,
};
use ntk_limits::nonlin::Nonlinearity;
use ntk_limits::Error;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

fn relu_arch(beta: f64, depth: usize) -> FcArchitecture {
    FcArchitecture::new(Nonlinearity::standardized_relu(), beta, depth, 1).unwrap()
}

#[test]
fn overlap_examples() {
    let x = [1.0, 1.0, -1.0, 1.0];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let orth = [1.0, -1.0, 1.0, 1.0];
    close(overlap(&x, &x, 4, false).unwrap(), 1.0, 1e-15);
    close(overlap(&x, &neg, 4, false).unwrap(), -1.0, 1e-15);
    close(overlap(&x, &orth, 4, false).unwrap(), 0.0, 1e-15);
    let off = [3.0, 0.0, 0.0, 0.0];
    assert!(matches!(overlap(&off, &x, 4, false), Err(Error::Domain(_))));
    close(overlap(&off, &off, 4, true).unwrap(), 1.0, 1e-15);
}

#[test]
fn activation_kernel_examples() {
    for s in [Nonlinearity::standardized_relu(), Nonlinearity::normalized_relu()] {
        let arch = FcArchitecture::new(s, 0.3, 12, 1).unwrap();
        for l in 1..=12 {
            close(arch.activation_kernel(1.0, l).unwrap(), 1.0, 1e-12);
        }
    }
    close(relu_arch(0.1, 3).activation_kernel(0.0, 1).unwrap(), 0.01, 1e-15);
    let v = relu_arch(0.5, 10).activation_kernel(0.0, 10).unwrap();
    assert!(v >= 1.0 - 1.5 * 0.75f64.powi(9) && v <= 1.0);
}

#[test]
fn ntk_diagonal_examples() {
    close(relu_arch(0.1, 5).ntk(1.0).unwrap(), (1.0 - 0.99f64.powi(5)) / 0.01, 1e-10);
    close(relu_arch(0.0, 7).ntk(1.0).unwrap(), 7.0, 1e-12);
    for rho in [-0.5, 0.0, 0.7] {
        close(relu_arch(0.3, 1).ntk(rho).unwrap(), 0.09 + 0.91 * rho, 1e-15);
    }
}

#[test]
fn diagonal_identity_up_to_depth_64() {
    let family = [
        Nonlinearity::standardized_relu(),
        Nonlinearity::normalized_relu(),
        Nonlinearity::hermite_series(vec![0.0, 0.8, 0.6]).unwrap(),
    ];
    for s in family {
        for beta in [0.0, 0.1, 0.5, 0.9] {
            let arch = FcArchitecture::new(s.clone(), beta, 64, 1).unwrap();
            let r = arch.characteristic_value().unwrap();
            let series = arch.trajectory(1.0).unwrap().ntk;
            for (k, t) in series.iter().enumerate() {
                let l = k as i32 + 1;
                let want = if (r - 1.0).abs() <= 1e-12 {
                    l as f64
                } else {
                    (1.0 - r.powi(l)) / (1.0 - r)
                };
                close(*t, want, 1e-10 * want.max(1.0));
            }
        }
    }
}

#[test]
fn ntk_never_exceeds_diagonal() {
    let arch = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.2, 20, 1).unwrap();
    let p = arch.profile(&rho_grid(81)).unwrap();
    let diag = arch.ntk(1.0).unwrap();
    for (t, n) in p.ntk.iter().zip(&p.ntk_normalized) {
        assert!(*t <= diag + 1e-12);
        assert!(*n <= 1.0 + 1e-12);
    }
}

#[test]
fn normalized_examples() {
    let arch = relu_arch(0.5, 30);
    close(arch.normalized_ntk(1.0).unwrap(), 1.0, 1e-15);
    let v = arch.normalized_ntk(0.0).unwrap();
    assert!(v <= 1.0 && v > 0.9);
    let chaos = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.1, 30, 1).unwrap();
    assert!(chaos.normalized_ntk(0.0).unwrap().abs() <= 1e-3);
}

#[test]
fn linear_network_matches_geometric_sums() {
    // Identity σ: Σ^(ℓ)(ρ) = 1 - (1-β²)^ℓ (1-ρ), Θ sums it against r^{L-ℓ}.
    let beta: f64 = 0.5;
    let r = 1.0 - beta * beta;
    let arch = FcArchitecture::new(Nonlinearity::identity(), beta, 15, 1).unwrap();
    for rho in rho_grid(21) {
        let t = arch.trajectory(rho).unwrap();
        let mut theta = 0.0;
        for l in 1..=15 {
            let sigma = 1.0 - r.powi(l) * (1.0 - rho);
            close(t.sigma[l as usize - 1], sigma, 1e-12);
            theta = theta * r + sigma;
            close(t.ntk[l as usize - 1], theta, 1e-12);
        }
    }
}

#[test]
fn order_bound_relu() {
    let arch = relu_arch(0.5, 40);
    let depths: Vec<usize> = (5..=40).collect();
    let rep = bound_check_order(&arch, &[0.0, 1.0], &depths).unwrap();
    assert_eq!(rep.kind, OrderBoundKind::Relu);
    let row = &rep.rows[0];
    assert!(row.consistent, "slope {:?}", row.fit);
    assert!(row.decays_at_claimed_rate);
    assert_eq!(rep.rows[1].max_deviation, 0.0);
    assert!(rep.passed());
}

#[test]
fn order_bound_identity_is_geometric() {
    let arch = FcArchitecture::new(Nonlinearity::identity(), 0.5, 40, 1).unwrap();
    let rep = bound_check_order(&arch, &[0.0, 0.5], &(4..=40).collect::<Vec<_>>()).unwrap();
    assert_eq!(rep.kind, OrderBoundKind::Differentiable);
    for row in &rep.rows {
        assert!(row.consistent);
        assert!(row.decays_at_claimed_rate);
    }
}

#[test]
fn order_bound_rejects_chaos() {
    let arch = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.1, 10, 1).unwrap();
    assert!(matches!(
        bound_check_order(&arch, &[0.0], &[2, 3]),
        Err(Error::Precondition(_))
    ));
    assert!(matches!(
        bound_check_chaos(&relu_arch(0.5, 10), &[0.0], &[2, 3]),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn chaos_bound_normalized_relu() {
    let arch = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.0, 40, 1).unwrap();
    let depths: Vec<usize> = (5..=40).collect();
    let rep = bound_check_chaos(&arch, &[0.5, 0.99, 1.0], &depths).unwrap();
    assert_eq!(rep.excluded, vec![1.0]);
    assert!(rep.passed());
    let h: Vec<f64> = rep.rows.iter().map(|r| r.h_fit.unwrap()).collect();
    assert!(h[0] < 1.0 && h[1] < 1.0);
    assert!(h[1] > h[0], "ρ = 0.99 should decay slower: {h:?}");
}

#[test]
fn sigma_bounds_hold_on_grid() {
    let grid = default_rho_grid();
    for beta in [0.1, 0.5] {
        let rep = sigma_bound_check(&relu_arch(beta, 40), &grid, 1e-12).unwrap();
        assert!(rep.violations.is_empty(), "β = {beta}: {}", rep.max_excess);
    }
    let chaos = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.1, 40, 1).unwrap();
    let rep = sigma_bound_check(&chaos, &grid, 1e-12).unwrap();
    assert!(rep.fixed_point.is_some());
    assert!(rep.violations.is_empty(), "{}", rep.max_excess);
}

#[test]
fn profile_shapes() {
    let arch = relu_arch(0.2, 4);
    let p = arch.profile(&default_rho_grid()).unwrap();
    assert_eq!(p.rho_grid.len(), 201);
    assert_eq!(p.rho_grid[0], -1.0);
    assert_eq!(p.rho_grid[200], 1.0);
    assert_eq!(p.sigma_layers.len(), 4);
    assert_eq!(p.sigma_dot_layers.len(), 3);
    close(p.ntk_normalized[200], 1.0, 1e-15);
}

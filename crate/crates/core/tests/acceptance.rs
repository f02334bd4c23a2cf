//! Acceptance suite: one line per criterion with its verdict, runtime and
//! budget. Runs without the libtest harness so the lines always print.
//!
//! A criterion listed in `KNOWN_DEVIATIONS` reports its verdict like any
//! other but does not fail the run; every other failure does.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ntk_limits::dcnn::{
    border_profile, box_points, checkerboard_profile, ldlr_diagonal_closed_form, ldlr_ntk,
    s_valuation, checkerboard_order_check, weighted_ntk, DcnnSpec, InputSampler, LrMode, Parametrization,
};
use ntk_limits::fc_kernel::{
    bound_check_chaos, bound_check_order, default_rho_grid, rho_grid, sigma_bound_check,
    FcArchitecture,
};
use ntk_limits::finwidth::{
    bn_rayleigh_check, constant_rayleigh, ln_equivalence_check, mc_sweep, FiniteNet, LnConfig,
    McConfig, NormLayer, OutputIndex,
};
use ntk_limits::netgraph::{
    ntk_field, sigma_field, Coord, InputField, KernelEvaluator, ParamKind, PositionGraph,
};
use ntk_limits::nonlin::Nonlinearity;
use ntk_limits::spectra::SpectrumPreset;
use ntk_limits::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The literal batch-norm statement is off by a factor of N; see the detail line.
const KNOWN_DEVIATIONS: &[usize] = &[12];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn relu_arch(beta: f64, depth: usize) -> Result<FcArchitecture> {
    FcArchitecture::new(Nonlinearity::standardized_relu(), beta, depth, 1)
}

fn smooth() -> Nonlinearity {
    Nonlinearity::hermite_series(vec![0.1, 0.8, 0.4, 0.2])
        .unwrap()
        .standardize()
        .unwrap()
}

fn line(n: i64) -> Vec<Coord> {
    (0..n).map(|p| [p, 0, 0]).collect()
}

fn c1_dual_closed_forms() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for s in [Nonlinearity::relu(), Nonlinearity::standardized_relu()] {
        for rho in default_rho_grid() {
            worst = worst.max((s.dual(rho)? - s.dual_by_quadrature(rho)?).abs());
            worst = worst
                .max((s.dual_derivative(rho)? - s.dual_derivative_by_quadrature(rho)?).abs());
        }
    }
    verdict(worst <= 1e-6, format!("max |closed - quadrature| = {worst:.2e} over 201 points"))
}

fn c2_diagonal_identity() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for beta in [0.0, 0.1, 0.5] {
        let r = 1.0 - beta * beta;
        let ntk = relu_arch(beta, 50)?.trajectory(1.0)?.ntk;
        for (k, t) in ntk.iter().enumerate() {
            let l = k as i32 + 1;
            let want = if beta == 0.0 { l as f64 } else { (1.0 - r.powi(l)) / (1.0 - r) };
            worst = worst.max((t - want).abs());
        }
    }
    verdict(worst <= 1e-10, format!("max deviation {worst:.2e}, L = 1..50, β ∈ {{0, 0.1, 0.5}}"))
}

fn c3_depth_bounds() -> Result<Verdict> {
    let order = bound_check_order(
        &relu_arch(0.5, 40)?,
        &[-0.9, -0.5, 0.0, 0.5, 0.9, 0.99],
        // Shallower depths are still pre-asymptotic near ρ = 1.
        &(10..=40).collect::<Vec<_>>(),
    )?;
    let slopes: Vec<f64> = order.rows.iter().filter_map(|r| r.fit.map(|f| f.slope)).collect();
    let order_ok = slopes.len() == order.rows.len() && order.rows.iter().all(|r| r.consistent);

    let chaos = FcArchitecture::new(Nonlinearity::normalized_relu(), 0.1, 30, 1)?;
    let at_zero = chaos.normalized_ntk(0.0)?.abs();
    let rep = bound_check_chaos(&chaos, &[-0.5, 0.0, 0.5], &(5..=30).collect::<Vec<_>>())?;
    let rates: Vec<f64> = rep.rows.iter().filter_map(|r| r.h_fit).collect();
    let chaos_ok = at_zero <= 1e-3
        && rates.len() == rep.rows.len()
        && rates.iter().all(|h| *h < 1.0);
    let worst_slope = slopes
        .iter()
        .map(|s| (s / order.claimed_slope - 1.0).abs())
        .fold(0.0, f64::max);
    verdict(
        order_ok && chaos_ok,
        format!(
            "order: slopes within {:.1}% of log(r)/2; chaos: |ϑ(0)| = {at_zero:.1e} at L = 30, rates ≤ {:.3}",
            100.0 * worst_slope,
            rates.iter().copied().fold(0.0, f64::max)
        ),
    )
}

fn c4_sigma_sandwich() -> Result<Verdict> {
    let grid = default_rho_grid();
    let mut checked = 0;
    let mut excess: f64 = 0.0;
    let mut violations = 0;
    for arch in [
        relu_arch(0.1, 40)?,
        relu_arch(0.5, 40)?,
        FcArchitecture::new(Nonlinearity::normalized_relu(), 0.1, 40, 1)?,
        FcArchitecture::new(Nonlinearity::normalized_relu(), 0.3, 40, 1)?,
    ] {
        let rep = sigma_bound_check(&arch, &grid, 1e-12)?;
        checked += rep.checked;
        excess = excess.max(rep.max_excess);
        violations += rep.violations.len();
    }
    verdict(
        violations == 0,
        format!("{checked} values in two order and two chaos settings, {violations} outside (max excess {excess:.1e})"),
    )
}

fn sphere_field(graph: &PositionGraph, n0: usize, seed: u64) -> Result<InputField> {
    InputSampler { n0, seed }.field(graph)
}

fn c5_reductions() -> Result<Verdict> {
    let mut chain_err: f64 = 0.0;
    let depth = 6;
    let g = PositionGraph::chain(depth)?;
    let root2 = 2f64.sqrt();
    for s in [Nonlinearity::standardized_relu(), Nonlinearity::normalized_relu(), smooth()] {
        for beta in [0.1, 0.5] {
            let arch = FcArchitecture::new(s.clone(), beta, depth, 2)?;
            for rho in rho_grid(41) {
                let c = (1.0 - rho * rho).max(0.0).sqrt();
                let x = InputField::new(2, vec![vec![root2, 0.0]])?;
                let y = InputField::new(2, vec![vec![root2 * rho, root2 * c]])?;
                for f in sigma_field(&g, &s, beta, &x, &y, None)? {
                    let want = arch.activation_kernel(rho, f.layer)?;
                    chain_err = chain_err.max((f.get(0, 0).unwrap() - want).abs());
                }
                let t = ntk_field(&g, &s, beta, &x, &y, None)?.get(0, 0).unwrap();
                chain_err = chain_err.max((t - arch.ntk(rho)?).abs());
            }
        }
    }

    let mut diag_err: f64 = 0.0;
    let relu = Nonlinearity::standardized_relu();
    for depth in 1..=4 {
        for (strides, windows, outs) in [
            (vec![2], vec![2], line(12)),
            (vec![3], vec![2], line(9)),
            (vec![2, 2], vec![2, 1], box_points(&[(0, 4), (0, 4)])),
            (vec![2, 3], vec![1, 2], box_points(&[(0, 4), (0, 3)])),
        ] {
            let spec = DcnnSpec::new(strides, windows, depth)?;
            let g = spec.build_borderless(&outs)?;
            for beta in [0.1, 0.5] {
                let r: f64 = 1.0 - beta * beta;
                let want = (1.0 - r.powi(depth as i32)) / (1.0 - r);
                let x = sphere_field(&g, 3, 7)?;
                let mut ev = KernelEvaluator::new(&g, &relu, beta, vec![x])?;
                for p in 0..outs.len() {
                    diag_err = diag_err.max((ev.sigma(depth, 0, p, 0, p)? - 1.0).abs());
                    diag_err = diag_err.max((ev.ntk(depth, 0, p, 0, p)? - want).abs());
                }
            }
        }
    }
    verdict(
        chain_err <= 1e-12 && diag_err <= 1e-10,
        format!("single-position graph vs fully connected {chain_err:.1e}; deconvolution diagonals {diag_err:.1e}"),
    )
}

fn c6_checkerboard() -> Result<Verdict> {
    let relu = Nonlinearity::standardized_relu();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for depth in 1..=4 {
        for (strides, windows, outs, beta) in [
            (vec![2], vec![2], line(20), 0.1),
            (vec![2], vec![2], line(20), 0.5),
            (vec![3], vec![1], line(12), 0.3),
            (vec![2, 2], vec![2, 1], box_points(&[(0, 4), (0, 4)]), 0.3),
        ] {
            let spec = DcnnSpec::new(strides, windows, depth)?;
            let prof = checkerboard_profile(&relu, beta, depth)?;
            let g = spec.build_borderless(&outs)?;
            let x = sphere_field(&g, 3, 1)?;
            let y = sphere_field(&g, 3, 2)?;
            let mut ev = KernelEvaluator::new(&g, &relu, beta, vec![x, y])?;
            for p in 0..outs.len() {
                worst = worst.max((ev.ntk(depth, 0, p, 0, p)? - prof.diagonal()).abs());
                for q in 0..outs.len() {
                    let diff: Vec<i64> = (0..spec.dim()).map(|d| outs[q][d] - outs[p][d]).collect();
                    let v = s_valuation(&diff, &spec.strides) as usize;
                    if v >= depth {
                        continue;
                    }
                    worst = worst.max((ev.sigma(depth, 0, p, 1, q)? - prof.c[v]).abs());
                    worst = worst.max((ev.ntk(depth, 0, p, 1, q)? - prof.ntk[v]).abs());
                    compared += 1;
                }
            }
        }
    }
    let sandwich = checkerboard_order_check(&relu, 0.1, &[1, 2, 3, 4], &[5, 6, 7, 8])?;
    verdict(
        worst <= 1e-10 && sandwich.passed(),
        format!(
            "{compared} pairs, max deviation {worst:.1e}; sandwich with C₁ = {:.3}: {} upper, {} lower violations",
            sandwich.constant, sandwich.upper_violations, sandwich.lower_violations
        ),
    )
}

fn c7_support() -> Result<Verdict> {
    let relu = Nonlinearity::standardized_relu();
    let depth = 3;
    let spec = DcnnSpec::new(vec![2], vec![2], depth)?;
    let outs = line(16);
    let g = spec.build_borderless(&outs)?;
    let x = sphere_field(&g, 2, 3)?;
    let y = sphere_field(&g, 2, 4)?;
    let mut ev = KernelEvaluator::new(&g, &relu, 0.3, vec![x, y])?;
    let (mut outside, mut leaks, mut inside_nonzero, mut inside) = (0, 0, 0, 0);
    for p in 0..outs.len() {
        for q in 0..outs.len() {
            let v = s_valuation(&[outs[q][0] - outs[p][0]], &spec.strides) as usize;
            for l in 0..depth {
                for (kind, needed) in [(ParamKind::Weight, depth - l), (ParamKind::Bias, depth - l - 1)] {
                    let c = ev.contribution(kind, l, depth, 0, p, 1, q)?;
                    if v < needed {
                        outside += 1;
                        leaks += usize::from(c != 0.0);
                    } else {
                        inside += 1;
                        inside_nonzero += usize::from(c != 0.0);
                    }
                }
            }
        }
    }
    verdict(
        leaks == 0 && inside_nonzero == inside,
        format!("{outside} contributions outside the support, {leaks} nonzero; {inside_nonzero}/{inside} inside are nonzero"),
    )
}

fn c8_border() -> Result<Verdict> {
    let relu = Nonlinearity::standardized_relu();
    let mut worst: f64 = 0.0;
    for depth in 1..=12 {
        let b = border_profile(&relu, 0.5, depth, Parametrization::Standard, 8)?;
        worst = worst.max(b.max_closed_form_error.unwrap_or(f64::INFINITY));
    }
    let depth = 4;
    let flat = (1.0 - 0.75f64.powi(depth as i32)) / 0.25;
    let g = border_profile(&relu, 0.5, depth, Parametrization::GraphBased, 32)?;
    let spread = g
        .rows
        .iter()
        .map(|r| (r.ntk_diag - flat).abs().max((r.sigma_diag - 1.0).abs()))
        .fold(0.0, f64::max);
    verdict(
        worst <= 1e-12 && spread <= 1e-12,
        format!("closed forms vs recursion {worst:.1e} for L ≤ 12; graph-based profile off flat by {spread:.1e}"),
    )
}

fn c9_layer_rates() -> Result<Verdict> {
    let relu = Nonlinearity::standardized_relu();
    let mut worst: f64 = 0.0;
    for beta in [0.1, 0.5, 0.8] {
        let r = relu.characteristic_value(beta)?;
        for depth in 1..=20 {
            let spec = DcnnSpec::new(vec![2], vec![2], depth)?;
            let prof = ldlr_ntk(&relu, beta, &spec, LrMode::Uniform)?;
            let closed = ldlr_diagonal_closed_form(2.0, r, depth);
            worst = worst.max((prof.diagonal() - closed).abs());
            if depth <= 4 {
                let g = spec.build_borderless(&line(8))?;
                let x = sphere_field(&g, 3, 5)?;
                let mut ev = KernelEvaluator::new(&g, &relu, beta, vec![x])?;
                let t = weighted_ntk(&mut ev, LrMode::Uniform, 2.0, 0, 3, 0, 3)?;
                worst = worst.max((t - closed).abs());
            }
        }
    }
    let beta = 0.8;
    let r = relu.characteristic_value(beta)?;
    let diags: Vec<f64> = (2..=20)
        .map(|l| {
            let spec = DcnnSpec::new(vec![2], vec![2], l)?;
            Ok(ldlr_ntk(&relu, beta, &spec, LrMode::Uniform)?.diagonal())
        })
        .collect::<Result<_>>()?;
    let monotone = diags.windows(2).all(|w| w[1] < w[0]);
    verdict(
        worst <= 1e-12 && 2f64.sqrt() * r < 1.0 && monotone,
        format!(
            "closed form vs weighted recursion {worst:.1e}; √S·r = {:.3}, diagonals decreasing over L = 2..20: {monotone}",
            2f64.sqrt() * r
        ),
    )
}

fn random_batch(n0: usize, count: usize, seed: u64) -> Result<Vec<InputField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..n0).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = (n0 as f64).sqrt() / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            InputField::new(n0, vec![v.iter().map(|x| x * s).collect()])
        })
        .collect()
}

/// Largest relative gap between backprop and central differences.
fn gradient_error(net: &FiniteNet, inputs: &[InputField], out: OutputIndex) -> Result<f64> {
    let g = net.gradient(inputs, out)?;
    let theta = net.parameters();
    let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.set_parameters(&t)?;
        let up = probe.forward(inputs)?.output(out);
        t[i] -= 2.0 * h;
        probe.set_parameters(&t)?;
        let dn = probe.forward(inputs)?.output(out);
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-2 * scale));
    }
    Ok(worst)
}

fn c10_gradients() -> Result<Verdict> {
    let batch = random_batch(3, 4, 10)?;
    let out = OutputIndex::new(1, 0, 1);
    let widths = vec![3, 8, 8, 2];
    let mut nets = vec![
        ("plain", FiniteNet::fc(Nonlinearity::standardized_relu(), 0.2, widths.clone(), 11)?),
        ("ln-post", FiniteNet::fc(smooth(), 0.2, widths.clone(), 12)?.with_norm_everywhere(NormLayer::LnPost)),
        ("ln-pre", FiniteNet::fc(smooth(), 0.2, widths.clone(), 12)?.with_norm_everywhere(NormLayer::LnPre)),
        ("bn", FiniteNet::fc(smooth(), 0.2, widths.clone(), 13)?.with_norm(2, NormLayer::BnPost)?),
    ];
    let spec = DcnnSpec::new(vec![2], vec![2], 2)?;
    let g = spec.build_borderless(&line(8))?;
    nets.push(("deconv", FiniteNet::sample(g, Nonlinearity::standardized_relu(), 0.2, vec![2, 3, 3], 5)?));
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, net) in &nets {
        let e = if *name == "deconv" {
            let x = sphere_field(net.graph(), 2, 6)?;
            gradient_error(net, &[x], OutputIndex::new(0, 3, 2))?
        } else {
            gradient_error(net, &batch, out)?
        };
        pass &= e <= 1e-5 && net.parameter_count() <= 1000;
        parts.push(format!("{name} {e:.1e} ({} params)", net.parameter_count()));
    }
    verdict(pass, parts.join(", "))
}

fn c11_monte_carlo() -> Result<Verdict> {
    let rep = mc_sweep(&McConfig {
        sigma: Nonlinearity::standardized_relu(),
        beta: 0.1,
        depth: 3,
        n0: 4,
        widths: vec![256, 1024, 4096],
        seeds: 50,
        base_seed: 0,
        rhos: vec![0.0, 0.5],
    })?;
    let slope = rep.slope.map(|f| f.slope).unwrap_or(f64::NAN);
    let median = rep.median_rel_by_width.last().map(|m| m.1).unwrap_or(f64::NAN);
    verdict(
        (slope + 0.5).abs() <= 0.15 && median <= 0.05,
        format!("log-error slope {slope:.3}; median relative error at 4096 = {:.2}%", 100.0 * median),
    )
}

fn c12_batch_norm() -> Result<Verdict> {
    let beta: f64 = 0.1;
    let b2 = beta * beta;
    let n = 8;
    let batch = random_batch(4, n, 60)?;
    let (mut literal, mut scaled, mut mean_entry, mut control): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, f64::INFINITY);
    for seed in 0..10 {
        let net = FiniteNet::fc(smooth(), beta, vec![4, 64, 64, 1], seed)?
            .with_norm(2, NormLayer::BnPost)?;
        let rep = bn_rayleigh_check(&net, &batch)?;
        literal = literal.max((rep.rayleigh - b2).abs());
        scaled = scaled.max(rep.rayleigh_error());
        mean_entry = mean_entry.max(rep.mean_entry_error());
        let plain = FiniteNet::fc(Nonlinearity::standardized_relu(), beta, vec![4, 64, 64, 1], seed)?;
        control = control.min(constant_rayleigh(&plain, &batch)?.rayleigh);
    }
    verdict(
        literal <= 1e-8 && control > 10.0 * b2,
        format!(
            "(1/N)1ᵀΘ̃1 - β² up to {literal:.3e}: the quotient equals Nβ² (error {scaled:.1e}) and the mean entry equals β² (error {mean_entry:.1e}); no-BN control ≥ {control:.3} > 10β²"
        ),
    )
}

fn c13_layer_norm() -> Result<Verdict> {
    let rep = ln_equivalence_check(&LnConfig {
        sigma: Nonlinearity::standardized_relu(),
        beta: 0.1,
        depth: 3,
        n0: 4,
        widths: vec![512, 4096],
        seeds: 8,
        base_seed: 0,
        rhos: vec![0.0, 0.5],
    })?;
    let (small, wide) = (&rep.rows[0], &rep.rows[1]);
    let ratio = rep.pre_noise_ratio().unwrap_or(f64::NAN);
    verdict(
        wide.post_vs_limit <= 0.05 && rep.post_deviation_shrinks() && ratio <= 2.0,
        format!(
            "LN-post vs limit {:.4} at 512, {:.4} at 4096; LN-pre vs plain {:.2e} = {ratio:.2}× noise floor",
            small.post_vs_limit, wide.post_vs_limit, wide.pre_vs_plain
        ),
    )
}

fn c14_spectral_separation() -> Result<Verdict> {
    let preset = SpectrumPreset::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in 0..5 {
        let run = preset.run(seed)?;
        pass &= run.separated();
        parts.push(format!("{:.3}>{:.3}", run.order_high, run.chaos_high));
    }
    verdict(pass, format!("order vs chaos high-valuation energy: {}", parts.join(" ")))
}

type Check = fn() -> Result<Verdict>;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Check, u64); 14] = [
        (1, "ReLU dual closed forms", c1_dual_closed_forms, 1),
        (2, "diagonal NTK identity", c2_diagonal_identity, 1),
        (3, "order and chaos depth bounds", c3_depth_bounds, 10),
        (4, "activation kernel sandwich", c4_sigma_sandwich, 5),
        (5, "graph reductions and diagonal invariance", c5_reductions, 30),
        (6, "checkerboard closed forms", c6_checkerboard, 30),
        (7, "divisibility support", c7_support, 10),
        (8, "border closed forms", c8_border, 5),
        (9, "layer-dependent learning rates", c9_layer_rates, 5),
        (10, "gradient oracle", c10_gradients, 60),
        (11, "Monte Carlo convergence", c11_monte_carlo, 600),
        (12, "batch-norm Rayleigh quotient", c12_batch_norm, 60),
        (13, "layer-norm equivalence", c13_layer_norm, 600),
        (14, "spectral separation", c14_spectral_separation, 120),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(v) => (v.pass && in_time, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let known = KNOWN_DEVIATIONS.contains(&id);
        println!(
            "criterion {id:>2} {}  {name} [{:.2}s / {budget}s{}] {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
        );
        if !pass && !known {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

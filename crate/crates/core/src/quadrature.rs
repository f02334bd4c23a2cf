//! Gaussian expectations by Gauss–Hermite and piecewise Gauss–Legendre rules.
//!
//! Smooth integrands use a tensor Gauss–Hermite rule. Integrands with known
//! kinks or jumps (ReLU and its derivative) are split at those points and
//! integrated piece by piece with Gauss–Legendre against the normal density on
//! `[-TAIL, TAIL]`, which keeps closed forms and quadrature within 1e-6 of
//! each other even for discontinuous integrands.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncation of the real line for piecewise rules; the normal mass beyond is ~1.5e-23.
const TAIL: f64 = 10.0;

/// Largest normal mass that may fall outside an integrand's support.
const MAX_SKIPPED_MASS: f64 = 1e-12;

/// Relative offsets (in units of the conditional standard deviation) at which the
/// outer integral is additionally split around a smoothed kink.
const SMOOTHED_KINK_SPLITS: [f64; 4] = [1.0, 4.0, -1.0, -4.0];

const NEWTON_EPS: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub node_count: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { node_count: 80 }
    }
}

impl QuadratureSpec {
    pub fn new(node_count: usize) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::Config(format!(
                "quadrature needs at least 2 nodes, got {node_count}"
            )));
        }
        Ok(Self { node_count })
    }
}

/// A one-dimensional quadrature rule: nodes and weights.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss–Hermite rule for the standard normal law: `E[f(Z)] ≈ Σ w_i f(z_i)`, `Σ w_i = 1`.
pub fn gauss_hermite_normal(n: usize) -> Result<Rule> {
    // Newton iteration on orthonormal physicists' Hermite functions.
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "Gauss-Hermite node {i} of {n} did not converge"
            )));
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let norm = PI.sqrt();
    let nodes = x.iter().map(|t| t * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().map(|wi| wi / norm).collect();
    Ok(Rule { nodes, weights })
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<Rule> {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "Gauss-Legendre node {i} of {n} did not converge"
            )));
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    Ok(Rule { nodes: x, weights: w })
}

/// A scalar function together with what the integrator needs to know about it.
pub struct Integrand<'a> {
    pub eval: &'a dyn Fn(f64) -> f64,
    /// Points where the function or its derivative is discontinuous.
    pub kinks: &'a [f64],
    /// Closed interval outside which the function is undefined.
    pub support: Option<(f64, f64)>,
}

impl Integrand<'_> {
    fn defined_at(&self, x: f64) -> bool {
        match self.support {
            Some((lo, hi)) => x >= lo && x <= hi,
            None => true,
        }
    }
}

/// Cached rules for a given node count.
#[derive(Debug)]
pub struct Quadrature {
    hermite: Rule,
    legendre: Rule,
}

fn cache() -> &'static Mutex<HashMap<usize, Arc<Quadrature>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Quadrature>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

struct Accumulator {
    sum: f64,
    skipped: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self { sum: 0.0, skipped: 0.0 }
    }

    fn finish(self) -> Result<f64> {
        if self.skipped > MAX_SKIPPED_MASS {
            return Err(Error::Domain(format!(
                "integrand undefined on normal mass {:.3e} (tabulated grid too narrow)",
                self.skipped
            )));
        }
        Ok(self.sum)
    }
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Sorted, deduplicated break points clipped to `(-TAIL, TAIL)`, with the end points added.
fn pieces(mut breaks: Vec<f64>) -> Vec<f64> {
    breaks.retain(|b| b.is_finite() && b.abs() < TAIL);
    breaks.push(-TAIL);
    breaks.push(TAIL);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    breaks
}

impl Quadrature {
    pub fn new(spec: QuadratureSpec) -> Result<Self> {
        let spec = QuadratureSpec::new(spec.node_count)?;
        Ok(Self {
            hermite: gauss_hermite_normal(spec.node_count)?,
            legendre: gauss_legendre(spec.node_count)?,
        })
    }

    /// Shared rules for `spec`, built once per process.
    pub fn shared(spec: QuadratureSpec) -> Result<Arc<Quadrature>> {
        let mut guard = cache().lock().expect("quadrature cache poisoned");
        if let Some(q) = guard.get(&spec.node_count) {
            return Ok(Arc::clone(q));
        }
        let q = Arc::new(Quadrature::new(spec)?);
        guard.insert(spec.node_count, Arc::clone(&q));
        Ok(q)
    }

    pub fn hermite(&self) -> &Rule {
        &self.hermite
    }

    /// `E[g(Z)]` for `Z ~ N(0,1)` split at `breaks` (the points are used as-is).
    fn piecewise<F: FnMut(f64, f64)>(&self, breaks: Vec<f64>, mut visit: F) {
        let pts = pieces(breaks);
        for win in pts.windows(2) {
            let (a, b) = (win[0], win[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (t, w) in self.legendre.nodes.iter().zip(&self.legendre.weights) {
                let z = mid + half * t;
                visit(z, w * half * normal_pdf(z));
            }
        }
    }

    /// `E[f(Z)]`, `Z ~ N(0,1)`.
    pub fn expect(&self, f: &Integrand<'_>) -> Result<f64> {
        let mut acc = Accumulator::new();
        if f.kinks.is_empty() {
            for (z, w) in self.hermite.nodes.iter().zip(&self.hermite.weights) {
                if f.defined_at(*z) {
                    acc.sum += w * (f.eval)(*z);
                } else {
                    acc.skipped += w;
                }
            }
        } else {
            self.piecewise(f.kinks.to_vec(), |z, w| {
                if f.defined_at(z) {
                    acc.sum += w * (f.eval)(z);
                } else {
                    acc.skipped += w;
                }
            });
        }
        acc.finish()
    }

    /// `E[f0(v0) f1(v1)]` for `(v0, v1)` standard bivariate normal with correlation `rho`.
    pub fn expect_pair(&self, f0: &Integrand<'_>, f1: &Integrand<'_>, rho: f64) -> Result<f64> {
        if !rho.is_finite() || rho.abs() > 1.0 + 1e-12 {
            return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
        }
        let rho = rho.clamp(-1.0, 1.0);
        if rho.abs() == 1.0 {
            return self.expect_degenerate(f0, f1, rho.signum());
        }
        let s = (1.0 - rho * rho).sqrt();
        let smooth = f0.kinks.is_empty() && f1.kinks.is_empty();
        let mut acc = Accumulator::new();
        if smooth {
            let h = &self.hermite;
            for (z0, w0) in h.nodes.iter().zip(&h.weights) {
                if !f0.defined_at(*z0) {
                    acc.skipped += w0;
                    continue;
                }
                let a = (f0.eval)(*z0);
                let mut inner = 0.0;
                for (z1, w1) in h.nodes.iter().zip(&h.weights) {
                    let v1 = rho * z0 + s * z1;
                    if f1.defined_at(v1) {
                        inner += w1 * (f1.eval)(v1);
                    } else {
                        acc.skipped += w0 * w1;
                    }
                }
                acc.sum += w0 * a * inner;
            }
            return acc.finish();
        }

        let mut outer = f0.kinks.to_vec();
        if rho != 0.0 {
            for b in f1.kinks {
                let centre = b / rho;
                outer.push(centre);
                for c in SMOOTHED_KINK_SPLITS {
                    outer.push(centre + c * s / rho.abs());
                }
            }
        }
        let mut skipped = 0.0;
        let mut total = 0.0;
        self.piecewise(outer, |z0, w0| {
            if !f0.defined_at(z0) {
                skipped += w0;
                return;
            }
            let a = (f0.eval)(z0);
            if a == 0.0 {
                return;
            }
            let mut inner = 0.0;
            if f1.kinks.is_empty() {
                for (z1, w1) in self.hermite.nodes.iter().zip(&self.hermite.weights) {
                    let v1 = rho * z0 + s * z1;
                    if f1.defined_at(v1) {
                        inner += w1 * (f1.eval)(v1);
                    } else {
                        skipped += w0 * w1;
                    }
                }
            } else {
                let breaks = f1.kinks.iter().map(|b| (b - rho * z0) / s).collect();
                self.piecewise(breaks, |z1, w1| {
                    let v1 = rho * z0 + s * z1;
                    if f1.defined_at(v1) {
                        inner += w1 * (f1.eval)(v1);
                    } else {
                        skipped += w0 * w1;
                    }
                });
            }
            total += w0 * a * inner;
        });
        acc.sum = total;
        acc.skipped = skipped;
        acc.finish()
    }

    /// `E[f0(Z) f1(sign·Z)]`: the bivariate law collapsed onto a line.
    fn expect_degenerate(&self, f0: &Integrand<'_>, f1: &Integrand<'_>, sign: f64) -> Result<f64> {
        let kinks: Vec<f64> = f0
            .kinks
            .iter()
            .copied()
            .chain(f1.kinks.iter().map(|b| sign * b))
            .collect();
        let product = |z: f64| (f0.eval)(z) * (f1.eval)(sign * z);
        let lo0 = f0.support;
        let lo1 = f1.support.map(|(lo, hi)| if sign > 0.0 { (lo, hi) } else { (-hi, -lo) });
        let support = match (lo0, lo1) {
            (Some((a, b)), Some((c, d))) => Some((a.max(c), b.min(d))),
            (s @ Some(_), None) | (None, s @ Some(_)) => s,
            (None, None) => None,
        };
        self.expect(&Integrand {
            eval: &product,
            kinks: &kinks,
            support,
        })
    }
}

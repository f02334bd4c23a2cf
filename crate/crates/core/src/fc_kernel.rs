//! Limiting kernels of fully-connected networks on the sphere.
//!
//! With inputs on the `√n0`-sphere every kernel is a function of the overlap
//! `ρ = xᵀy/n0` alone:
//!
//! ```text
//! Σ^(1)   = B_β(ρ)
//! Σ^(ℓ+1) = B_β(R_σ(Σ^(ℓ)))
//! Σ̇^(ℓ+1) = (1-β²)·R_σ̇(Σ^(ℓ))
//! Θ^(1)   = Σ^(1),   Θ^(ℓ+1) = Σ^(ℓ+1) + Θ^(ℓ)·Σ̇^(ℓ+1)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{log_fit, LineFit};
use crate::nonlin::{affine_bias, check_beta, Nonlinearity};

/// Deviations at or below this are float noise and are left out of fits.
pub const FIT_FLOOR: f64 = 1e-14;

/// Relative slack on fitted log-slopes.
pub const SLOPE_SLACK: f64 = 0.1;

const SPHERE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FcArchitecture {
    pub sigma: Nonlinearity,
    pub beta: f64,
    pub depth: usize,
    pub n0: usize,
}

/// All layer values at one overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rho: f64,
    /// `Σ^(ℓ)` for `ℓ = 1..=L`.
    pub sigma: Vec<f64>,
    /// `Σ̇^(ℓ)` for `ℓ = 2..=L`.
    pub sigma_dot: Vec<f64>,
    /// `Θ^(ℓ)` for `ℓ = 1..=L`.
    pub ntk: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelProfile {
    pub depth: usize,
    pub beta: f64,
    pub rho_grid: Vec<f64>,
    /// `[ℓ-1][i]` holds `Σ^(ℓ)(rho_grid[i])`.
    pub sigma_layers: Vec<Vec<f64>>,
    /// `[ℓ-2][i]` holds `Σ̇^(ℓ)(rho_grid[i])` for `ℓ = 2..=L`.
    pub sigma_dot_layers: Vec<Vec<f64>>,
    pub ntk: Vec<f64>,
    pub ntk_normalized: Vec<f64>,
}

/// `count` uniform points on `[-1, 1]` whose endpoints are exactly ±1.
pub fn rho_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let mut g: Vec<f64> = (0..count)
                .map(|i| -1.0 + 2.0 * i as f64 / (count - 1) as f64)
                .collect();
            g[0] = -1.0;
            g[count - 1] = 1.0;
            g
        }
    }
}

pub fn default_rho_grid() -> Vec<f64> {
    rho_grid(201)
}

/// Scale `x` onto the `√n0`-sphere.
pub fn project_to_sphere(x: &[f64]) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Domain("cannot project the zero vector onto the sphere".into()));
    }
    let target = (x.len() as f64).sqrt();
    Ok(x.iter().map(|v| v * target / norm).collect())
}

pub fn check_on_sphere(x: &[f64], n0: usize) -> Result<()> {
    if x.len() != n0 {
        return Err(Error::Dimension(format!("input has length {}, expected {n0}", x.len())));
    }
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    if (norm2.sqrt() - (n0 as f64).sqrt()).abs() > SPHERE_TOL {
        return Err(Error::Domain(format!(
            "input norm {} is off the sqrt(n0) = {} sphere",
            norm2.sqrt(),
            (n0 as f64).sqrt()
        )));
    }
    Ok(())
}

/// `xᵀy/n0` for on-sphere inputs. With `project` the inputs are first scaled onto the sphere.
pub fn overlap(x: &[f64], y: &[f64], n0: usize, project: bool) -> Result<f64> {
    let (x, y) = if project {
        (project_to_sphere(x)?, project_to_sphere(y)?)
    } else {
        (x.to_vec(), y.to_vec())
    };
    check_on_sphere(&x, n0)?;
    check_on_sphere(&y, n0)?;
    let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    Ok((dot / n0 as f64).clamp(-1.0, 1.0))
}

impl FcArchitecture {
    pub fn new(sigma: Nonlinearity, beta: f64, depth: usize, n0: usize) -> Result<Self> {
        check_beta(beta)?;
        if depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if n0 == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        Ok(Self {
            sigma,
            beta,
            depth,
            n0,
        })
    }

    pub fn with_depth(&self, depth: usize) -> Result<Self> {
        Self::new(self.sigma.clone(), self.beta, depth, self.n0)
    }

    pub fn characteristic_value(&self) -> Result<f64> {
        self.sigma.characteristic_value(self.beta)
    }

    /// Every layer value at overlap `rho`.
    pub fn trajectory(&self, rho: f64) -> Result<Trajectory> {
        if !rho.is_finite() || rho.abs() > 1.0 + 1e-12 {
            return Err(Error::Domain(format!("overlap {rho} outside [-1, 1]")));
        }
        let rho = rho.clamp(-1.0, 1.0);
        let b2 = self.beta * self.beta;
        let l = self.depth;
        let mut sigma = Vec::with_capacity(l);
        let mut sigma_dot = Vec::with_capacity(l.saturating_sub(1));
        let mut ntk = Vec::with_capacity(l);
        let s1 = affine_bias(self.beta, rho);
        sigma.push(s1);
        ntk.push(s1);
        for _ in 1..l {
            let prev = *sigma.last().unwrap();
            let s = affine_bias(self.beta, self.sigma.dual(prev)?);
            let sd = (1.0 - b2) * self.sigma.dual_derivative(prev)?;
            let t = s + ntk.last().unwrap() * sd;
            sigma.push(s);
            sigma_dot.push(sd);
            ntk.push(t);
        }
        Ok(Trajectory {
            rho,
            sigma,
            sigma_dot,
            ntk,
        })
    }

    /// `Σ^(ℓ)(ρ)` for `1 ≤ ℓ ≤ L`.
    pub fn activation_kernel(&self, rho: f64, layer: usize) -> Result<f64> {
        if layer == 0 || layer > self.depth {
            return Err(Error::Domain(format!("layer {layer} outside 1..={}", self.depth)));
        }
        Ok(self.with_depth(layer)?.trajectory(rho)?.sigma[layer - 1])
    }

    /// `Θ^(L)(ρ)`.
    pub fn ntk(&self, rho: f64) -> Result<f64> {
        Ok(*self.trajectory(rho)?.ntk.last().unwrap())
    }

    /// `Θ^(L)(ρ)/Θ^(L)(1)`.
    pub fn normalized_ntk(&self, rho: f64) -> Result<f64> {
        let diag = self.ntk(1.0)?;
        if diag <= 0.0 {
            return Err(Error::Degenerate(format!("diagonal NTK is {diag}")));
        }
        Ok(self.ntk(rho)? / diag)
    }

    /// `ϑ^(ℓ)(ρ)` for every `ℓ = 1..=L`.
    pub fn normalized_series(&self, rho: f64) -> Result<Vec<f64>> {
        let diag = self.trajectory(1.0)?.ntk;
        let off = self.trajectory(rho)?.ntk;
        diag.iter()
            .zip(&off)
            .enumerate()
            .map(|(i, (d, o))| {
                if *d <= 0.0 {
                    Err(Error::Degenerate(format!("diagonal NTK at depth {} is {d}", i + 1)))
                } else {
                    Ok(o / d)
                }
            })
            .collect()
    }

    pub fn profile(&self, grid: &[f64]) -> Result<KernelProfile> {
        let diag = self.ntk(1.0)?;
        if diag <= 0.0 {
            return Err(Error::Degenerate(format!("diagonal NTK is {diag}")));
        }
        let rows: Vec<Trajectory> = grid
            .par_iter()
            .map(|rho| self.trajectory(*rho))
            .collect::<Result<_>>()?;
        let l = self.depth;
        let sigma_layers = (0..l).map(|k| rows.iter().map(|t| t.sigma[k]).collect()).collect();
        let sigma_dot_layers = (0..l.saturating_sub(1))
            .map(|k| rows.iter().map(|t| t.sigma_dot[k]).collect())
            .collect();
        let ntk: Vec<f64> = rows.iter().map(|t| t.ntk[l - 1]).collect();
        let ntk_normalized = ntk.iter().map(|t| t / diag).collect();
        Ok(KernelProfile {
            depth: l,
            beta: self.beta,
            rho_grid: grid.to_vec(),
            sigma_layers,
            sigma_dot_layers,
            ntk,
            ntk_normalized,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderBoundKind {
    /// `1-ϑ ≤ C r^{L/2}`: fit `log(1-ϑ)` against `L`, claimed slope `log(r)/2`.
    Relu,
    /// `1-ϑ ≤ C₁ L r^L`: fit `log((1-ϑ)/L)` against `L`, claimed slope `log r`.
    Differentiable,
    /// No bound is known; the differentiable-σ fit is reported for information.
    Informational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub rho: f64,
    pub fit: Option<LineFit>,
    /// Fit restricted to the deeper half of the depth range.
    pub tail_fit: Option<LineFit>,
    /// Smallest `C` with `dev ≤ C·rate(L)` over the range.
    pub fitted_constant: Option<f64>,
    /// Largest `1-ϑ` over the range; 0 on the diagonal row.
    pub max_deviation: f64,
    /// Fitted slope within `SLOPE_SLACK` of the claimed one.
    pub consistent: bool,
    /// Tail slope at least as steep as the claimed one, up to the slack.
    pub decays_at_claimed_rate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderBoundReport {
    pub r: f64,
    pub beta: f64,
    pub kind: OrderBoundKind,
    pub claimed_slope: f64,
    pub depths: Vec<usize>,
    pub rows: Vec<OrderRow>,
}

impl OrderBoundReport {
    pub fn passed(&self) -> bool {
        self.kind == OrderBoundKind::Informational
            || self.rows.iter().all(|r| r.decays_at_claimed_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    pub rho: f64,
    pub fit: Option<LineFit>,
    /// `exp(slope)` of `log|ϑ|` against `L`.
    pub h_fit: Option<f64>,
    pub last_abs: f64,
    pub decays: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosBoundReport {
    pub r: f64,
    pub beta: f64,
    pub depths: Vec<usize>,
    /// Rows at `ρ = ±1` are outside the chaos bound and skipped.
    pub excluded: Vec<f64>,
    pub rows: Vec<ChaosRow>,
}

impl ChaosBoundReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.decays)
    }
}

fn check_depths(depths: &[usize]) -> Result<usize> {
    if depths.len() < 2 || depths.contains(&0) {
        return Err(Error::Config("bound fits need at least two positive depths".into()));
    }
    Ok(*depths.iter().max().unwrap())
}

pub fn default_depths() -> Vec<usize> {
    (4..=40).collect()
}

/// Order-regime depth bound: `1-ϑ^(L)` must decay at the rate claimed for its class of σ.
pub fn bound_check_order(
    arch: &FcArchitecture,
    grid: &[f64],
    depths: &[usize],
) -> Result<OrderBoundReport> {
    let r = arch.characteristic_value()?;
    if r >= 1.0 {
        return Err(Error::Precondition(format!(
            "order bound needs r < 1, got r = {r}"
        )));
    }
    let deep = arch.with_depth(check_depths(depths)?)?;
    let kind = if arch.sigma.is_relu() {
        OrderBoundKind::Relu
    } else if arch.sigma.is_differentiable() {
        OrderBoundKind::Differentiable
    } else {
        OrderBoundKind::Informational
    };
    let claimed_slope = match kind {
        OrderBoundKind::Relu => r.ln() / 2.0,
        _ => r.ln(),
    };
    let xs: Vec<f64> = depths.iter().map(|l| *l as f64).collect();
    let rows = grid
        .par_iter()
        .map(|rho| {
            let series = deep.normalized_series(*rho)?;
            let dev: Vec<f64> = depths.iter().map(|l| 1.0 - series[l - 1]).collect();
            let max_deviation = dev.iter().cloned().fold(0.0, f64::max);
            let target: Vec<f64> = match kind {
                OrderBoundKind::Relu => dev.clone(),
                _ => dev.iter().zip(&xs).map(|(d, l)| d / l).collect(),
            };
            let fit = log_fit(&xs, &target, FIT_FLOOR);
            let consistent = fit.is_none_or(|f| {
                (f.slope - claimed_slope).abs() <= SLOPE_SLACK * claimed_slope.abs()
            });
            // Shallow depths are pre-asymptotic, so the rate verdict uses the
            // deeper half of the range.
            let half = xs.len() / 2;
            let tail = log_fit(&xs[half..], &target[half..], FIT_FLOOR);
            let decays = match tail {
                Some(f) => f.slope <= claimed_slope * (1.0 - SLOPE_SLACK),
                None => max_deviation <= FIT_FLOOR,
            };
            let constant = target
                .iter()
                .zip(&xs)
                .map(|(t, l)| t / (claimed_slope * l).exp())
                .fold(0.0, f64::max);
            Ok(OrderRow {
                rho: *rho,
                fit,
                tail_fit: tail,
                fitted_constant: (max_deviation > FIT_FLOOR).then_some(constant),
                max_deviation,
                consistent,
                decays_at_claimed_rate: decays,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrderBoundReport {
        r,
        beta: arch.beta,
        kind,
        claimed_slope,
        depths: depths.to_vec(),
        rows,
    })
}

/// Chaos-regime depth bound: `|ϑ^(L)|` must decay exponentially off the diagonal.
pub fn bound_check_chaos(
    arch: &FcArchitecture,
    grid: &[f64],
    depths: &[usize],
) -> Result<ChaosBoundReport> {
    let r = arch.characteristic_value()?;
    if r <= 1.0 {
        return Err(Error::Precondition(format!(
            "chaos bound needs r > 1, got r = {r}"
        )));
    }
    let deep = arch.with_depth(check_depths(depths)?)?;
    let xs: Vec<f64> = depths.iter().map(|l| *l as f64).collect();
    let (excluded, kept): (Vec<f64>, Vec<f64>) = grid.iter().partition(|r| r.abs() >= 1.0);
    let rows = kept
        .par_iter()
        .map(|rho| {
            let series = deep.normalized_series(*rho)?;
            let abs: Vec<f64> = depths.iter().map(|l| series[l - 1].abs()).collect();
            let fit = log_fit(&xs, &abs, FIT_FLOOR);
            let h_fit = fit.map(|f| f.slope.exp());
            let last_abs = *abs.last().unwrap();
            Ok(ChaosRow {
                rho: *rho,
                fit,
                h_fit,
                last_abs,
                decays: h_fit.map_or(last_abs <= FIT_FLOOR, |h| h < 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChaosBoundReport {
        r,
        beta: arch.beta,
        depths: depths.to_vec(),
        excluded,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaBoundReport {
    pub r: f64,
    pub fixed_point: Option<f64>,
    pub checked: usize,
    /// Largest amount by which any `Σ^(ℓ)(ρ)` leaves its interval.
    pub max_excess: f64,
    pub violations: Vec<(usize, f64, f64)>,
}

/// Check `1-2r^{ℓ-1}(1-β²) ≤ Σ^(ℓ) ≤ 1` (order) or `|Σ^(ℓ)| ≤ max(|B_β(ρ)|, a)` (chaos).
pub fn sigma_bound_check(arch: &FcArchitecture, grid: &[f64], tol: f64) -> Result<SigmaBoundReport> {
    let r = arch.characteristic_value()?;
    let fixed_point = arch.sigma.fixed_point(arch.beta)?;
    let b2 = arch.beta * arch.beta;
    let rows: Vec<Trajectory> = grid
        .par_iter()
        .map(|rho| arch.trajectory(*rho))
        .collect::<Result<_>>()?;
    let mut max_excess = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    let mut checked = 0;
    for t in &rows {
        for (k, s) in t.sigma.iter().enumerate() {
            let layer = k + 1;
            let excess = if r < 1.0 {
                let lo = 1.0 - 2.0 * r.powi(layer as i32 - 1) * (1.0 - b2);
                (lo - s).max(s - 1.0)
            } else {
                let hi = affine_bias(arch.beta, t.rho).abs().max(fixed_point.unwrap_or(0.0));
                s.abs() - hi
            };
            checked += 1;
            max_excess = max_excess.max(excess);
            if excess > tol {
                violations.push((layer, t.rho, *s));
            }
        }
    }
    Ok(SigmaBoundReport {
        r,
        fixed_point,
        checked,
        max_excess,
        violations,
    })
}

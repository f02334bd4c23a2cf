//! Nonlinearities, their Gaussian moments and dual activations.
//!
//! A [`Nonlinearity`] is a base shape composed with an affine adjustment
//! `a·σ(x) + c`, which makes standardization and normalization exact
//! transformations rather than new tabulations.
//!
//! The dual activation of `σ` is `R_σ(ρ) = E[σ(v0) σ(v1)]` for a standard
//! bivariate normal pair with correlation `ρ`; `R_σ̇` is the same expectation
//! for the a.e. derivative. ReLU, identity and Hermite series have closed
//! forms; tabulated functions go through quadrature.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{Integrand, Quadrature, QuadratureSpec};

/// Half-width the tabulated grid must cover.
pub const TABLE_MIN_REACH: f64 = 8.0;

/// Width of the band around `r = 1` classified as the edge of chaos.
pub const REGIME_TOL: f64 = 1e-9;

const FIXED_POINT_RESIDUAL: f64 = 1e-12;
const FIXED_POINT_MAX_ITER: usize = 200;

/// Tolerance on `E[σ²] = 1` when a standardized σ is required.
const STANDARDIZED_TOL: f64 = 1e-8;

/// Second moments below this are treated as a zero function.
const ZERO_VARIANCE: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Relu,
    Identity,
    Tanh,
    /// `σ(x) = Σ b_i He_i(x) / √(i!)` in the orthonormal probabilists' basis.
    HermiteSeries { coefficients: Vec<f64> },
    /// Piecewise-linear interpolation through `(x_i, y_i)`.
    Tabulated { x: Vec<f64>, y: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Raw,
    Standardized,
    Normalized,
}

/// Serializable description: a shape plus the normalization to apply to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
}

impl NonlinearitySpec {
    pub fn build(&self) -> Result<Nonlinearity> {
        let base = Nonlinearity::with_quadrature(self.shape.clone(), self.quadrature)?;
        match self.normalization {
            Normalization::Raw => Ok(base),
            Normalization::Standardized => base.standardize(),
            Normalization::Normalized => base.normalize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    shape: Shape,
    scale: f64,
    shift: f64,
    quadrature: QuadratureSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Order,
    Edge,
    Chaos,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Order => "order",
            Regime::Edge => "edge",
            Regime::Chaos => "chaos",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub r: f64,
    pub regime: Regime,
    pub fixed_point: Option<f64>,
    pub beta: f64,
    pub notes: Vec<String>,
}

/// `B_β(ρ) = β² + (1-β²)ρ`.
pub fn affine_bias(beta: f64, rho: f64) -> f64 {
    let b2 = beta * beta;
    b2 + (1.0 - b2) * rho
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

/// Clamp a correlation that is within rounding of `[-1, 1]`.
fn check_rho(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(rho.clamp(-1.0, 1.0))
}

fn relu_kernel(rho: f64) -> f64 {
    ((1.0 - rho * rho).max(0.0).sqrt() + (PI - rho.acos()) * rho) / (2.0 * PI)
}

fn relu_derivative_kernel(rho: f64) -> f64 {
    (PI - rho.acos()) / (2.0 * PI)
}

/// Orthonormal Hermite functions `h_0..h_K` at `x`, with `h_n' = √n h_{n-1}`.
fn hermite_basis(x: f64, k: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if k == 0 {
        return;
    }
    out.push(x);
    for n in 1..k {
        let nf = n as f64;
        let next = (x * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
        out.push(next);
    }
}

fn validate_shape(shape: &Shape) -> Result<()> {
    match shape {
        Shape::Relu | Shape::Identity | Shape::Tanh => Ok(()),
        Shape::HermiteSeries { coefficients } => {
            if coefficients.is_empty() {
                return Err(Error::Config("hermite series needs at least one coefficient".into()));
            }
            if coefficients.iter().any(|b| !b.is_finite()) {
                return Err(Error::Config("hermite coefficients must be finite".into()));
            }
            Ok(())
        }
        Shape::Tabulated { x, y } => {
            if x.len() != y.len() || x.len() < 2 {
                return Err(Error::Config(format!(
                    "table needs matching x/y of length >= 2, got {} and {}",
                    x.len(),
                    y.len()
                )));
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::Config("table entries must be finite".into()));
            }
            if x.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("table x must be strictly increasing".into()));
            }
            if x[0] > -TABLE_MIN_REACH || x[x.len() - 1] < TABLE_MIN_REACH {
                return Err(Error::Config(format!(
                    "table covers [{}, {}], needs at least [-{TABLE_MIN_REACH}, {TABLE_MIN_REACH}]",
                    x[0],
                    x[x.len() - 1]
                )));
            }
            Ok(())
        }
    }
}

/// Index `i` of the segment `[x_i, x_{i+1}]` holding `t`, clamped to the end segments.
fn segment(x: &[f64], t: f64) -> usize {
    let n = x.len();
    match x.partition_point(|v| *v <= t) {
        0 => 0,
        i if i >= n => n - 2,
        i => i - 1,
    }
}

fn table_slope_at_node(x: &[f64], y: &[f64], i: usize) -> f64 {
    let n = x.len();
    let (lo, hi) = match i {
        0 => (0, 1),
        i if i == n - 1 => (n - 2, n - 1),
        i => (i - 1, i + 1),
    };
    (y[hi] - y[lo]) / (x[hi] - x[lo])
}

impl Nonlinearity {
    pub fn new(shape: Shape) -> Result<Self> {
        Self::with_quadrature(shape, QuadratureSpec::default())
    }

    pub fn with_quadrature(shape: Shape, quadrature: QuadratureSpec) -> Result<Self> {
        validate_shape(&shape)?;
        QuadratureSpec::new(quadrature.node_count)?;
        Ok(Self {
            shape,
            scale: 1.0,
            shift: 0.0,
            quadrature,
        })
    }

    pub fn relu() -> Self {
        Self::new(Shape::Relu).expect("relu is always valid")
    }

    pub fn identity() -> Self {
        Self::new(Shape::Identity).expect("identity is always valid")
    }

    pub fn tanh() -> Self {
        Self::new(Shape::Tanh).expect("tanh is always valid")
    }

    pub fn hermite_series(coefficients: Vec<f64>) -> Result<Self> {
        Self::new(Shape::HermiteSeries { coefficients })
    }

    pub fn tabulated(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Tabulated { x, y })
    }

    /// Tabulate `f` on `n` uniform points of `[-reach, reach]`.
    pub fn tabulate(f: impl Fn(f64) -> f64, reach: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("table needs at least two points".into()));
        }
        let x: Vec<f64> = (0..n)
            .map(|i| -reach + 2.0 * reach * i as f64 / (n - 1) as f64)
            .collect();
        let y = x.iter().map(|t| f(*t)).collect();
        Self::tabulated(x, y)
    }

    /// `√2·max(x, 0)`.
    pub fn standardized_relu() -> Self {
        Self::relu().affine(std::f64::consts::SQRT_2, 0.0)
    }

    /// `(max(x,0) - 1/√(2π)) / √(1/2 - 1/(2π))`, from closed-form moments.
    pub fn normalized_relu() -> Self {
        let mean = 1.0 / (2.0 * PI).sqrt();
        let sd = (0.5 - 1.0 / (2.0 * PI)).sqrt();
        Self::relu().affine(1.0 / sd, -mean / sd)
    }

    /// Compose with `t ↦ a·t + c` on the output side.
    pub fn affine(&self, a: f64, c: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            scale: a * self.scale,
            shift: a * self.shift + c,
            quadrature: self.quadrature,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        self.quadrature
    }

    /// Kind label used in reports.
    pub fn kind(&self) -> &'static str {
        match self.shape {
            Shape::Relu => "relu",
            Shape::Identity => "identity",
            Shape::Tanh => "tanh",
            Shape::HermiteSeries { .. } => "hermite-series",
            Shape::Tabulated { .. } => "tabulated",
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self.shape, Shape::Relu)
    }

    /// True when `σ(λx) = λσ(x)` for `λ > 0`, which lets kernels with
    /// non-unit variances reduce to the dual exactly.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(self.shape, Shape::Relu | Shape::Identity) && self.shift == 0.0
    }

    /// Whether σ is smooth enough for the differentiable-σ depth bounds.
    pub fn is_differentiable(&self) -> bool {
        matches!(self.shape, Shape::Identity | Shape::Tanh | Shape::HermiteSeries { .. })
    }

    fn base(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Relu => x.max(0.0),
            Shape::Identity => x,
            Shape::Tanh => x.tanh(),
            Shape::HermiteSeries { coefficients } => {
                let mut h = Vec::with_capacity(coefficients.len());
                hermite_basis(x, coefficients.len() - 1, &mut h);
                coefficients.iter().zip(&h).map(|(b, hi)| b * hi).sum()
            }
            Shape::Tabulated { x: xs, y } => {
                let i = segment(xs, x);
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                y[i] + t * (y[i + 1] - y[i])
            }
        }
    }

    fn base_derivative(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Shape::Identity => 1.0,
            Shape::Tanh => 1.0 - x.tanh().powi(2),
            Shape::HermiteSeries { coefficients } => {
                let k = coefficients.len() - 1;
                if k == 0 {
                    return 0.0;
                }
                let mut h = Vec::with_capacity(k);
                hermite_basis(x, k - 1, &mut h);
                (1..=k)
                    .map(|n| coefficients[n] * (n as f64).sqrt() * h[n - 1])
                    .sum()
            }
            Shape::Tabulated { x: xs, y } => {
                let i = segment(xs, x);
                let t = ((x - xs[i]) / (xs[i + 1] - xs[i])).clamp(0.0, 1.0);
                let d0 = table_slope_at_node(xs, y, i);
                let d1 = table_slope_at_node(xs, y, i + 1);
                d0 + t * (d1 - d0)
            }
        }
    }

    /// `a·σ(x) + c`. Tables extrapolate linearly from their end segments.
    pub fn eval(&self, x: f64) -> f64 {
        self.scale * self.base(x) + self.shift
    }

    /// A.e. derivative; ReLU uses 0 at the origin.
    pub fn derivative(&self, x: f64) -> f64 {
        self.scale * self.base_derivative(x)
    }

    fn kinks(&self) -> &'static [f64] {
        match self.shape {
            Shape::Relu => &[0.0],
            // Not a kink: the poles at ±iπ/2 cap Gauss-Hermite near 1e-10,
            // and the piecewise Legendre rules reach machine precision.
            Shape::Tanh => &[0.0],
            _ => &[],
        }
    }

    fn support(&self) -> Option<(f64, f64)> {
        match &self.shape {
            Shape::Tabulated { x, .. } => Some((x[0], x[x.len() - 1])),
            _ => None,
        }
    }

    fn rules(&self) -> Result<std::sync::Arc<Quadrature>> {
        Quadrature::shared(self.quadrature)
    }

    /// `E[σ(Z)^power]` for `power ∈ {1, 2}`, by quadrature.
    pub fn gaussian_moment(&self, power: u32) -> Result<f64> {
        if !(1..=2).contains(&power) {
            return Err(Error::Domain(format!("moment power must be 1 or 2, got {power}")));
        }
        let f = |x: f64| self.eval(x).powi(power as i32);
        self.rules()?.expect(&Integrand {
            eval: &f,
            kinks: self.kinks(),
            support: self.support(),
        })
    }

    /// `E[σ̇(Z)²] = R_σ̇(1)`.
    pub fn derivative_second_moment(&self) -> Result<f64> {
        self.dual_derivative(1.0)
    }

    /// Rescale so that `E[σ(Z)²] = 1`.
    pub fn standardize(&self) -> Result<Self> {
        let m2 = self.gaussian_moment(2)?;
        if m2 <= ZERO_VARIANCE {
            return Err(Error::Precondition(format!(
                "cannot standardize a zero function (E[σ²] = {m2:.3e})"
            )));
        }
        Ok(self.affine(1.0 / m2.sqrt(), 0.0))
    }

    /// Center and rescale so that `E[σ(Z)] = 0` and `E[σ(Z)²] = 1`.
    pub fn normalize(&self) -> Result<Self> {
        let m1 = self.gaussian_moment(1)?;
        let m2 = self.gaussian_moment(2)?;
        let var = m2 - m1 * m1;
        if var <= ZERO_VARIANCE * m2.max(1.0) {
            return Err(Error::Precondition(format!(
                "cannot normalize a constant function (Var[σ] = {var:.3e})"
            )));
        }
        let sd = var.sqrt();
        Ok(self.affine(1.0 / sd, -m1 / sd))
    }

    /// Hermite coefficients with the affine adjustment folded in.
    fn folded_series(&self) -> Option<Vec<f64>> {
        match &self.shape {
            Shape::HermiteSeries { coefficients } => {
                let mut b: Vec<f64> = coefficients.iter().map(|c| self.scale * c).collect();
                b[0] += self.shift;
                Some(b)
            }
            _ => None,
        }
    }

    /// `R_σ(ρ)`.
    pub fn dual(&self, rho: f64) -> Result<f64> {
        let rho = check_rho(rho)?;
        let (a, c) = (self.scale, self.shift);
        match &self.shape {
            Shape::Relu => {
                Ok(a * a * relu_kernel(rho) + 2.0 * a * c / (2.0 * PI).sqrt() + c * c)
            }
            Shape::Identity => Ok(a * a * rho + c * c),
            Shape::HermiteSeries { .. } => {
                let b = self.folded_series().unwrap_or_default();
                Ok(b.iter().rev().fold(0.0, |acc, bi| acc * rho + bi * bi))
            }
            Shape::Tanh | Shape::Tabulated { .. } => self.dual_by_quadrature(rho),
        }
    }

    /// `R_σ̇(ρ)`.
    pub fn dual_derivative(&self, rho: f64) -> Result<f64> {
        let rho = check_rho(rho)?;
        let a = self.scale;
        match &self.shape {
            Shape::Relu => Ok(a * a * relu_derivative_kernel(rho)),
            Shape::Identity => Ok(a * a),
            Shape::HermiteSeries { .. } => {
                let b = self.folded_series().unwrap_or_default();
                Ok(b.iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (i, bi)| acc * rho + i as f64 * bi * bi))
            }
            Shape::Tanh | Shape::Tabulated { .. } => self.dual_derivative_by_quadrature(rho),
        }
    }

    /// `R_σ(ρ)` by bivariate quadrature, bypassing any closed form.
    pub fn dual_by_quadrature(&self, rho: f64) -> Result<f64> {
        let f = |x: f64| self.eval(x);
        let g = Integrand {
            eval: &f,
            kinks: self.kinks(),
            support: self.support(),
        };
        self.rules()?.expect_pair(&g, &g, rho)
    }

    /// `R_σ̇(ρ)` by bivariate quadrature, bypassing any closed form.
    pub fn dual_derivative_by_quadrature(&self, rho: f64) -> Result<f64> {
        let f = |x: f64| self.derivative(x);
        let g = Integrand {
            eval: &f,
            kinks: self.kinks(),
            support: self.support(),
        };
        self.rules()?.expect_pair(&g, &g, rho)
    }

    /// `r_{σ,β} = (1-β²)·E[σ̇(Z)²]`.
    pub fn characteristic_value(&self, beta: f64) -> Result<f64> {
        check_beta(beta)?;
        Ok((1.0 - beta * beta) * self.derivative_second_moment()?)
    }

    pub fn is_standardized(&self) -> Result<bool> {
        Ok((self.gaussian_moment(2)? - 1.0).abs() <= STANDARDIZED_TOL)
    }

    /// Nontrivial fixed point of `B_β∘R_σ` in `[0, 1)` when `r_{σ,β} > 1`.
    pub fn fixed_point(&self, beta: f64) -> Result<Option<f64>> {
        if !self.is_standardized()? {
            return Err(Error::Precondition(
                "fixed point requires a standardized nonlinearity".into(),
            ));
        }
        let r = self.characteristic_value(beta)?;
        if r <= 1.0 + REGIME_TOL {
            return Ok(None);
        }
        let f = |a: f64| -> Result<f64> { Ok(affine_bias(beta, self.dual(a)?) - a) };
        let f0 = f(0.0)?;
        if f0.abs() <= FIXED_POINT_RESIDUAL {
            return Ok(Some(0.0));
        }
        // F(0) > 0 and F < 0 just below the trivial fixed point at 1.
        let mut eps = 1e-3;
        let mut hi = 1.0 - eps;
        while f(hi)? >= 0.0 {
            eps *= 0.1;
            if eps < 1e-12 {
                return Err(Error::Numerical(
                    "could not bracket the nontrivial fixed point below 1".into(),
                ));
            }
            hi = 1.0 - eps;
        }
        let mut lo = 0.0;
        for _ in 0..FIXED_POINT_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid)?;
            if fm.abs() <= FIXED_POINT_RESIDUAL {
                return Ok(Some(mid));
            }
            if fm > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(Error::Numerical(format!(
            "fixed-point bisection did not reach residual {FIXED_POINT_RESIDUAL:e} in {FIXED_POINT_MAX_ITER} steps"
        )))
    }

    pub fn classify(&self, beta: f64) -> Result<RegimeReport> {
        let r = self.characteristic_value(beta)?;
        let regime = if r < 1.0 - REGIME_TOL {
            Regime::Order
        } else if r > 1.0 + REGIME_TOL {
            Regime::Chaos
        } else {
            Regime::Edge
        };
        let mut notes = Vec::new();
        if !self.is_relu() && !self.is_differentiable() {
            notes.push("bounds not guaranteed: σ is not differentiable".to_string());
        }
        let standardized = self.is_standardized()?;
        if !standardized {
            notes.push("σ is not standardized; Σ(x,x) = 1 does not hold".to_string());
        }
        let fixed_point = if regime == Regime::Chaos && standardized {
            self.fixed_point(beta)?
        } else {
            None
        };
        Ok(RegimeReport {
            r,
            regime,
            fixed_point,
            beta,
            notes,
        })
    }
}

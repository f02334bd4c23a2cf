//! Deconvolutional networks: graph construction, s-valuations, the checkerboard
//! closed forms, layer-dependent learning rates and border profiles.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::log_fit;
use crate::netgraph::{
    coord, Coord, EdgeNormalization, GraphBuilder, InputField, KernelEvaluator, ParamKind,
    PositionGraph, MAX_DIM,
};
use crate::nonlin::{check_beta, Nonlinearity};

pub use crate::netgraph::layerwise_ntk;

/// `v_s(0)`: divisible by every power of the stride.
pub const INFINITE_VALUATION: u32 = u32::MAX;

/// Values at or below this are treated as exact zeros in decay fits.
const DECAY_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BorderMode {
    /// Positions materialized by ancestor closure from an output patch.
    #[default]
    Borderless,
    /// `I_ℓ = {0..n_ℓ}` per dimension, one extent vector per layer `0..=L`.
    Bounded { extents: Vec<Vec<i64>> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// `1/√(|P(p)| n_ℓ)` edge normalization.
    #[default]
    GraphBased,
    /// `1/√(Π w_d · n_ℓ)` regardless of how many parents survive at a border.
    Standard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrMode {
    /// Weights and bias producing layer `ℓ` both scaled by `S^{-ℓ/2}`.
    #[default]
    Uniform,
    /// Weights by `S^{-ℓ/2}`, bias by `S^{-(ℓ+1)/2}`.
    ShiftedBias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcnnSpec {
    pub strides: Vec<i64>,
    /// Window multipliers `w`: each window spans `w_d·s_d` taps.
    pub windows: Vec<i64>,
    /// First tap of each window; `q` is a parent of `p` when
    /// `s·q - p ∈ {start..start + w·s - 1}`. Defaults to 0.
    #[serde(default)]
    pub window_start: Option<Vec<i64>>,
    pub depth: usize,
    #[serde(default)]
    pub border: BorderMode,
    #[serde(default)]
    pub parametrization: Parametrization,
}

/// `v_s(n)`: the largest `k` with `s_i^k | n_i` for every `i`.
pub fn s_valuation(n: &[i64], s: &[i64]) -> u32 {
    if n.iter().all(|x| *x == 0) {
        return INFINITE_VALUATION;
    }
    let mut n: Vec<i64> = n.to_vec();
    let mut k = 0;
    loop {
        if n.iter().zip(s).any(|(x, s)| x % s != 0) {
            return k;
        }
        for (x, s) in n.iter_mut().zip(s) {
            *x /= s;
        }
        k += 1;
    }
}

impl DcnnSpec {
    pub fn new(strides: Vec<i64>, windows: Vec<i64>, depth: usize) -> Result<Self> {
        let spec = Self {
            strides,
            windows,
            window_start: None,
            depth,
            border: BorderMode::Borderless,
            parametrization: Parametrization::GraphBased,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.strides.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::Config(format!("dimension must be in 1..={MAX_DIM}, got {d}")));
        }
        if self.windows.len() != d {
            return Err(Error::Config("windows and strides differ in dimension".into()));
        }
        if let Some(s) = self.strides.iter().find(|s| **s < 2) {
            return Err(Error::Config(format!("strides must be at least 2, got {s}")));
        }
        if let Some(w) = self.windows.iter().find(|w| **w < 1) {
            return Err(Error::Config(format!("window multipliers must be at least 1, got {w}")));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if let Some(start) = &self.window_start {
            if start.len() != d {
                return Err(Error::Config("window_start has the wrong dimension".into()));
            }
        }
        if let BorderMode::Bounded { extents } = &self.border {
            if extents.len() != self.depth + 1 {
                return Err(Error::Config(format!(
                    "bounded mode needs {} extents, got {}",
                    self.depth + 1,
                    extents.len()
                )));
            }
            if extents.iter().any(|e| e.len() != d || e.iter().any(|n| *n < 1)) {
                return Err(Error::Config("extents must be positive, one per dimension".into()));
            }
        }
        Ok(())
    }

    /// `S = Π s_d`.
    pub fn stride_product(&self) -> f64 {
        self.strides.iter().product::<i64>() as f64
    }

    pub fn parent_count(&self) -> i64 {
        self.windows.iter().product()
    }

    fn start(&self, d: usize) -> i64 {
        self.window_start.as_ref().map_or(0, |s| s[d])
    }

    /// Parent range per dimension (inclusive) before any border clipping.
    fn parent_box(&self, p: &Coord) -> Vec<(i64, i64)> {
        (0..self.dim())
            .map(|d| {
                let s = self.strides[d];
                let lo = p[d] + self.start(d);
                let hi = lo + self.windows[d] * s - 1;
                (lo.div_euclid(s) + i64::from(lo.rem_euclid(s) != 0), hi.div_euclid(s))
            })
            .collect()
    }

    fn normalization(&self) -> EdgeNormalization {
        match self.parametrization {
            Parametrization::GraphBased => EdgeNormalization::ParentCount,
            Parametrization::Standard => EdgeNormalization::Fixed {
                fan_in: self.parent_count() as f64,
            },
        }
    }

    /// Bounded mode uses the configured extents; borderless mode needs the output patch.
    pub fn build(&self, patch: Option<&[Coord]>) -> Result<PositionGraph> {
        match (&self.border, patch) {
            (BorderMode::Borderless, Some(p)) => self.build_borderless(p),
            (BorderMode::Borderless, None) => Err(Error::Config(
                "borderless mode needs an output patch".into(),
            )),
            (BorderMode::Bounded { .. }, _) => self.build_bounded(),
        }
    }

    /// Ancestor closure of `outputs`; every position above layer 0 has all `Π w_d` parents.
    pub fn build_borderless(&self, outputs: &[Coord]) -> Result<PositionGraph> {
        self.validate()?;
        if outputs.is_empty() {
            return Err(Error::Config("empty output patch".into()));
        }
        let mut b = GraphBuilder::new(self.dim(), self.depth)?.normalization(self.normalization());
        let mut current: Vec<Coord> = Vec::with_capacity(outputs.len());
        for c in outputs {
            if c[self.dim()..].iter().any(|x| *x != 0) {
                return Err(Error::Dimension(format!("output {c:?} exceeds dimension")));
            }
            let before = b.layer_len(self.depth);
            if b.position(self.depth, *c) == before {
                current.push(*c);
            }
        }
        for l in (0..self.depth).rev() {
            let mut next = Vec::new();
            let mut classes: HashMap<Coord, usize> = HashMap::new();
            for p in &current {
                let child = b.find_position(l + 1, p).expect("child inserted");
                for q in box_points(&self.parent_box(p)) {
                    let before = b.layer_len(l);
                    let parent = b.position(l, q);
                    if parent == before {
                        next.push(q);
                    }
                    let e = b.edge(l, child, parent);
                    self.share_by_tap(&mut b, &mut classes, p, &q, e)?;
                }
            }
            current = next;
        }
        b.build()
    }

    pub fn build_bounded(&self) -> Result<PositionGraph> {
        self.validate()?;
        let BorderMode::Bounded { extents } = &self.border else {
            return Err(Error::Config("spec is not in bounded mode".into()));
        };
        let mut b = GraphBuilder::new(self.dim(), self.depth)?.normalization(self.normalization());
        for (l, e) in extents.iter().enumerate() {
            let bounds: Vec<(i64, i64)> = e.iter().map(|n| (0, n - 1)).collect();
            for c in box_points(&bounds) {
                b.position(l, c);
            }
        }
        for l in (0..self.depth).rev() {
            let mut classes: HashMap<Coord, usize> = HashMap::new();
            let inside = |q: &Coord| (0..self.dim()).all(|d| q[d] >= 0 && q[d] < extents[l][d]);
            let children: Vec<Coord> = box_points(
                &extents[l + 1].iter().map(|n| (0, n - 1)).collect::<Vec<_>>(),
            );
            for p in children {
                let child = b.find_position(l + 1, &p).expect("child inserted");
                let mut any = false;
                for q in box_points(&self.parent_box(&p)).into_iter().filter(inside) {
                    let parent = b.find_position(l, &q).expect("parent inside extents");
                    let e = b.edge(l, child, parent);
                    self.share_by_tap(&mut b, &mut classes, &p, &q, e)?;
                    any = true;
                }
                if !any {
                    return Err(Error::Config(format!(
                        "extents too small: position {:?} of layer {} has no parent inside layer {l}",
                        &p[..self.dim()],
                        l + 1
                    )));
                }
            }
        }
        b.build()
    }

    fn share_by_tap(
        &self,
        b: &mut GraphBuilder,
        classes: &mut HashMap<Coord, usize>,
        p: &Coord,
        q: &Coord,
        edge: usize,
    ) -> Result<()> {
        let mut tap = [0; MAX_DIM];
        for d in 0..self.dim() {
            tap[d] = self.strides[d] * q[d] - p[d];
        }
        match classes.get(&tap) {
            Some(first) => b.share(*first, edge),
            None => {
                classes.insert(tap, edge);
                Ok(())
            }
        }
    }
}

/// All integer points of an inclusive box, row-major.
pub fn box_points(bounds: &[(i64, i64)]) -> Vec<Coord> {
    let mut out = vec![[0; MAX_DIM]];
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut next = Vec::new();
        for c in &out {
            for x in *lo..=*hi {
                let mut c = *c;
                c[d] = x;
                next.push(c);
            }
        }
        out = next;
    }
    out
}

/// Deterministic on-sphere inputs indexed by position, independent of the patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSampler {
    pub n0: usize,
    pub seed: u64,
}

impl InputSampler {
    pub fn sample(&self, c: &Coord) -> Vec<f64> {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for x in c {
            h = (h ^ (*x as u64)).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let v: Vec<f64> = (0..self.n0).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = (self.n0 as f64).sqrt() / norm;
        v.into_iter().map(|x| x * scale).collect()
    }

    pub fn field(&self, graph: &PositionGraph) -> Result<InputField> {
        InputField::new(self.n0, graph.layer(0).iter().map(|c| self.sample(c)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardProfile {
    pub depth: usize,
    pub beta: f64,
    pub r: f64,
    /// Set for learning-rate weighted profiles.
    pub lr_mode: Option<LrMode>,
    pub stride_product: f64,
    /// `c_v` for `v = 0..L-1`.
    pub c: Vec<f64>,
    /// `Θ(v)` for `v = 0..L-1`, then the diagonal value at index `L`.
    pub ntk: Vec<f64>,
    pub ntk_normalized: Vec<f64>,
}

impl CheckerboardProfile {
    pub fn diagonal(&self) -> f64 {
        self.ntk[self.depth]
    }
}

fn require_standardized(sigma: &Nonlinearity) -> Result<()> {
    if !sigma.is_standardized()? {
        return Err(Error::Precondition(
            "checkerboard constants need a standardized σ".into(),
        ));
    }
    Ok(())
}

/// `c_v` and the per-layer derivative factors `(1-β²) R_σ̇(c_v)` for `v < L`.
fn constants(sigma: &Nonlinearity, beta: f64, depth: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_beta(beta)?;
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    require_standardized(sigma)?;
    let b2 = beta * beta;
    let mut c = Vec::with_capacity(depth);
    let mut d = Vec::with_capacity(depth);
    let mut v = b2;
    for _ in 0..depth {
        c.push(v);
        d.push((1.0 - b2) * sigma.dual_derivative(v)?);
        v = b2 + (1.0 - b2) * sigma.dual(v)?;
    }
    Ok((c, d))
}

/// Per-layer weights `(w_W, w_b)` for the layer `m = 1..=L` the parameters produce.
fn lr_weights(mode: Option<LrMode>, s: f64, m: usize) -> (f64, f64) {
    let m = m as f64;
    match mode {
        None => (1.0, 1.0),
        Some(LrMode::Uniform) => (s.powf(-m / 2.0), s.powf(-m / 2.0)),
        Some(LrMode::ShiftedBias) => (s.powf(-m / 2.0), s.powf(-(m + 1.0) / 2.0)),
    }
}

fn weighted_profile(
    sigma: &Nonlinearity,
    beta: f64,
    depth: usize,
    mode: Option<LrMode>,
    s: f64,
) -> Result<CheckerboardProfile> {
    let (c, d) = constants(sigma, beta, depth)?;
    let b2 = beta * beta;
    let r = sigma.characteristic_value(beta)?;
    // A pair of valuation v < L first shares parents at layer L - v, where
    // Σ = c_0 = β²; above that, layer L - v + k holds c_k.
    let mut ntk = Vec::with_capacity(depth + 1);
    for v in 0..depth {
        let mut total = 0.0;
        for k in 0..=v {
            let (ww, wb) = lr_weights(mode, s, depth - v + k);
            let carry: f64 = d[k..v].iter().product();
            total += (wb * b2 + ww * (c[k] - b2)) * carry;
        }
        ntk.push(total);
    }
    let mut diag = 0.0;
    for m in 1..=depth {
        let (ww, wb) = lr_weights(mode, s, m);
        diag += (wb * b2 + ww * (1.0 - b2)) * r.powi((depth - m) as i32);
    }
    ntk.push(diag);
    if diag <= 0.0 {
        return Err(Error::Degenerate("diagonal NTK is not positive".into()));
    }
    let ntk_normalized = ntk.iter().map(|t| t / diag).collect();
    Ok(CheckerboardProfile {
        depth,
        beta,
        r,
        lr_mode: mode,
        stride_product: s,
        c,
        ntk,
        ntk_normalized,
    })
}

/// `c_v = (B_β∘R_σ)^v(β²)` and `Θ(v) = c_v + (1-β²)R_σ̇(c_{v-1})Θ(v-1)`.
pub fn checkerboard_profile(
    sigma: &Nonlinearity,
    beta: f64,
    depth: usize,
) -> Result<CheckerboardProfile> {
    weighted_profile(sigma, beta, depth, None, 1.0)
}

/// Checkerboard profile of the NTK with learning rates scaled by powers of `S`.
pub fn ldlr_ntk(
    sigma: &Nonlinearity,
    beta: f64,
    spec: &DcnnSpec,
    mode: LrMode,
) -> Result<CheckerboardProfile> {
    spec.validate()?;
    weighted_profile(sigma, beta, spec.depth, Some(mode), spec.stride_product())
}

/// `S^{-L/2}(1-(√S r)^L)/(1-√S r)`, or `L·S^{-L/2}` when `√S r = 1`.
pub fn ldlr_diagonal_closed_form(s: f64, r: f64, depth: usize) -> f64 {
    let q = s.sqrt() * r;
    let scale = s.powf(-(depth as f64) / 2.0);
    if (q - 1.0).abs() < 1e-12 {
        scale * depth as f64
    } else {
        scale * (1.0 - q.powi(depth as i32)) / (1.0 - q)
    }
}

/// Learning-rate weighted NTK on an explicit graph, summed from layerwise contributions.
pub fn weighted_ntk(
    eval: &mut KernelEvaluator<'_>,
    mode: LrMode,
    s: f64,
    a: usize,
    p: usize,
    b: usize,
    q: usize,
) -> Result<f64> {
    let depth = eval.graph().depth();
    let mut total = 0.0;
    for l in 0..depth {
        let (ww, wb) = lr_weights(Some(mode), s, l + 1);
        total += ww * eval.contribution(ParamKind::Weight, l, depth, a, p, b, q)?;
        total += wb * eval.contribution(ParamKind::Bias, l, depth, a, p, b, q)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub depth: usize,
    pub v: usize,
    pub value: f64,
    pub upper: f64,
    /// Upper bound minus the fitted constant times the rate.
    pub lower: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub r: f64,
    pub fit_depths: Vec<usize>,
    pub check_depths: Vec<usize>,
    pub constant: f64,
    /// Smallest constant that makes the lower bound hold at each depth.
    pub constant_by_depth: Vec<(usize, f64)>,
    pub rows: Vec<SandwichRow>,
    pub upper_violations: usize,
    pub lower_violations: usize,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.upper_violations == 0 && self.lower_violations == 0
    }
}

const BOUND_TOL: f64 = 1e-12;

/// Shared logic for the two sandwich checks: `upper(L, v)` and `rate(L, v)`.
fn sandwich(
    r: f64,
    profiles: &[(usize, Vec<f64>)],
    fit_depths: &[usize],
    upper: impl Fn(usize, usize) -> f64,
    rate: impl Fn(usize, usize) -> f64,
) -> SandwichReport {
    let mut constant: f64 = 0.0;
    for (depth, theta) in profiles.iter().filter(|(l, _)| fit_depths.contains(l)) {
        for (v, t) in theta.iter().enumerate().take(*depth) {
            constant = constant.max((upper(*depth, v) - t) / rate(*depth, v));
        }
    }
    let constant_by_depth = profiles
        .iter()
        .map(|(depth, theta)| {
            let c = theta
                .iter()
                .enumerate()
                .take(*depth)
                .map(|(v, t)| (upper(*depth, v) - t) / rate(*depth, v))
                .fold(0.0, f64::max);
            (*depth, c)
        })
        .collect();
    let mut rows = Vec::new();
    let (mut up, mut low) = (0, 0);
    let mut check_depths = Vec::new();
    for (depth, theta) in profiles {
        let fitted = fit_depths.contains(depth);
        if !fitted {
            check_depths.push(*depth);
        }
        for (v, t) in theta.iter().enumerate().take(*depth) {
            let u = upper(*depth, v);
            let row = SandwichRow {
                depth: *depth,
                v,
                value: *t,
                upper: u,
                lower: u - constant * rate(*depth, v),
                rate: rate(*depth, v),
            };
            if row.value > row.upper + BOUND_TOL {
                up += 1;
            }
            if !fitted && row.value < row.lower - BOUND_TOL {
                low += 1;
            }
            rows.push(row);
        }
    }
    SandwichReport {
        r,
        fit_depths: fit_depths.to_vec(),
        check_depths,
        constant,
        constant_by_depth,
        rows,
        upper_violations: up,
        lower_violations: low,
    }
}

/// Order-regime sandwich on the checkerboard profile:
/// `(1-r^{v+1})/(1-r^L) - C₁(v+1)r^v ≤ ϑ(v) ≤ (1-r^{v+1})/(1-r^L)`, with `C₁`
/// fitted on `fit_depths` and checked on the remaining depths.
pub fn checkerboard_order_check(
    sigma: &Nonlinearity,
    beta: f64,
    fit_depths: &[usize],
    check_depths: &[usize],
) -> Result<SandwichReport> {
    let r = sigma.characteristic_value(beta)?;
    if r >= 1.0 {
        return Err(Error::Precondition(format!("order check needs r < 1, got {r}")));
    }
    let profiles = fit_depths
        .iter()
        .chain(check_depths)
        .map(|l| Ok((*l, checkerboard_profile(sigma, beta, *l)?.ntk_normalized)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sandwich(
        r,
        &profiles,
        fit_depths,
        |l, v| (1.0 - r.powi(v as i32 + 1)) / (1.0 - r.powi(l as i32)),
        |_, v| (v as f64 + 1.0) * r.powi(v as i32),
    ))
}

/// Sandwich for the learning-rate weighted profile with `q = √S r`:
/// `(1-q^{v+1})/(1-q^L) - C q^v/|1-q^L| ≤ ϑ(v) ≤ (1-q^{v+1})/(1-q^L)`.
/// The upper bound is checked; `C` is fitted over all depths and reported per
/// depth, since its supremum is only approached at large `L`.
pub fn ldlr_bound_check(
    sigma: &Nonlinearity,
    beta: f64,
    spec: &DcnnSpec,
    depths: &[usize],
) -> Result<SandwichReport> {
    let r = sigma.characteristic_value(beta)?;
    let q = spec.stride_product().sqrt() * r;
    if (q - 1.0).abs() < 1e-12 {
        return Err(Error::Precondition("the bounds are singular at √S·r = 1".into()));
    }
    let profiles = depths
        .iter()
        .map(|l| {
            let mut s = spec.clone();
            s.depth = *l;
            Ok((*l, ldlr_ntk(sigma, beta, &s, LrMode::Uniform)?.ntk_normalized))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sandwich(
        r,
        &profiles,
        depths,
        |l, v| (1.0 - q.powi(v as i32 + 1)) / (1.0 - q.powi(l as i32)),
        |l, v| q.powi(v as i32) / (1.0 - q.powi(l as i32)).abs(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosPair {
    pub p: Vec<i64>,
    pub q: Vec<i64>,
    pub depths: Vec<usize>,
    /// `ϑ^(L,pq)(x,y)` per depth.
    pub values: Vec<f64>,
    pub h_fit: Option<f64>,
    /// Largest `|x_aᵀy_b|/n0` over the input pairs the translated-patch condition
    /// covers, when `s^L | q - p` at some depth.
    pub max_overlap: Option<f64>,
    pub precondition_ok: bool,
    pub decays: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub r: f64,
    pub overlap_bound: f64,
    pub pairs: Vec<ChaosPair>,
}

impl ChaosReport {
    pub fn passed(&self) -> bool {
        self.pairs.iter().all(|p| !p.precondition_ok || p.decays)
    }
}

/// Evaluate `ϑ` on explicit borderless graphs for each depth and fit its decay rate.
pub fn checkerboard_chaos_check(
    sigma: &Nonlinearity,
    beta: f64,
    spec: &DcnnSpec,
    x: InputSampler,
    y: InputSampler,
    pairs: &[(Vec<i64>, Vec<i64>)],
    depths: &[usize],
    overlap_bound: f64,
) -> Result<ChaosReport> {
    let r = sigma.characteristic_value(beta)?;
    if r <= 1.0 {
        return Err(Error::Precondition(format!("chaos check needs r > 1, got {r}")));
    }
    if x.n0 != y.n0 {
        return Err(Error::Dimension("x and y samplers disagree on n0".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (p, q) in pairs {
        let (cp, cq) = (coord(p)?, coord(q)?);
        let mut values = Vec::with_capacity(depths.len());
        let mut max_overlap: Option<f64> = None;
        let mut precondition_ok = true;
        for &depth in depths {
            let mut s = spec.clone();
            s.depth = depth;
            s.border = BorderMode::Borderless;
            let g = s.build_borderless(&[cp, cq])?;
            let (xf, yf) = (x.field(&g)?, y.field(&g)?);
            let ip = g.index_of(depth, &cp).expect("output");
            let iq = g.index_of(depth, &cq).expect("output");
            let diff: Vec<i64> = (0..s.dim()).map(|d| cq[d] - cp[d]).collect();
            if s_valuation(&diff, &s.strides) >= depth as u32 {
                // Inputs meet translated copies of themselves: bound the overlaps.
                let shift: Vec<i64> = diff
                    .iter()
                    .zip(&s.strides)
                    .map(|(d, st)| d / st.pow(depth as u32))
                    .collect();
                let anc = g.ancestors(ip, depth, depth)?;
                for a in anc {
                    let mut c = g.layer(0)[a];
                    for d in 0..s.dim() {
                        c[d] += shift[d];
                    }
                    let xa = x.sample(&g.layer(0)[a]);
                    let yb = y.sample(&c);
                    let o = xa.iter().zip(&yb).map(|(u, v)| u * v).sum::<f64>() / x.n0 as f64;
                    max_overlap = Some(max_overlap.map_or(o.abs(), |m: f64| m.max(o.abs())));
                }
                if max_overlap.unwrap_or(0.0) >= overlap_bound {
                    precondition_ok = false;
                }
            }
            let mut ev = KernelEvaluator::new(&g, sigma, beta, vec![xf, yf])?;
            let theta = ev.ntk(depth, 0, ip, 1, iq)?;
            let dx = ev.ntk(depth, 0, ip, 0, ip)?;
            let dy = ev.ntk(depth, 1, iq, 1, iq)?;
            values.push(theta / (dx * dy).sqrt());
        }
        let xs: Vec<f64> = depths.iter().map(|l| *l as f64).collect();
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let (h_fit, decays) = if abs.iter().all(|v| *v <= DECAY_FLOOR) {
            (Some(0.0), true)
        } else {
            let h = log_fit(&xs, &abs, DECAY_FLOOR).map(|f| f.slope.exp());
            let shrinking = abs.last() < abs.first();
            (h, h.is_some_and(|h| h < 1.0) && shrinking)
        };
        out.push(ChaosPair {
            p: p.clone(),
            q: q.clone(),
            depths: depths.to_vec(),
            values,
            h_fit,
            max_overlap,
            precondition_ok,
            decays,
        });
    }
    Ok(ChaosReport {
        r,
        overlap_bound,
        pairs: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderRow {
    pub position: i64,
    pub sigma_diag: f64,
    pub ntk_diag: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderClosedForm {
    pub layer: usize,
    pub sigma_recursion: f64,
    pub sigma_closed: f64,
    pub ntk_recursion: f64,
    pub ntk_closed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderProfile {
    pub parametrization: Parametrization,
    pub depth: usize,
    pub beta: f64,
    pub r: f64,
    pub rows: Vec<BorderRow>,
    /// Per-layer border values at `p = 0` against the closed forms; only for
    /// standardized ReLU under the standard parametrization.
    pub closed_form: Option<Vec<BorderClosedForm>>,
    pub max_closed_form_error: Option<f64>,
}

/// `Σ^(ℓ,00)(x,x) = (β² + (r/2)^{ℓ+1})/(1 - r/2)` for standardized ReLU with stride 2.
pub fn border_sigma_closed_form(beta: f64, layer: usize) -> f64 {
    let h = (1.0 - beta * beta) / 2.0;
    (beta * beta + h.powi(layer as i32 + 1)) / (1.0 - h)
}

/// `Θ^(L,00)(x,x) = β²(1-(r/2)^L)/(1-r/2)² + L(r/2)^{L+1}/(1-r/2)`.
pub fn border_ntk_closed_form(beta: f64, depth: usize) -> f64 {
    let b2 = beta * beta;
    let h = (1.0 - b2) / 2.0;
    let l = depth as i32;
    b2 * (1.0 - h.powi(l)) / (1.0 - h).powi(2) + depth as f64 * h.powi(l + 1) / (1.0 - h)
}

/// The 1-D border setting: `I_ℓ = {0..n_ℓ}`, stride 2, taps `{-3..0}`, so
/// `P(p) = {⌊p/2⌋-1, ⌊p/2⌋} ∩ ℕ` and `P(0) = {0}`.
pub fn border_spec(depth: usize, outputs: i64, parametrization: Parametrization) -> DcnnSpec {
    let mut extents = vec![vec![outputs.max(1)]];
    for _ in 0..depth {
        let n = extents.last().expect("nonempty")[0];
        extents.push(vec![(n - 1).div_euclid(2) + 1]);
    }
    extents.reverse();
    DcnnSpec {
        strides: vec![2],
        windows: vec![2],
        window_start: Some(vec![-3]),
        depth,
        border: BorderMode::Bounded { extents },
        parametrization,
    }
}

/// Diagonal `Σ^(L,pp)(x,x)` and `Θ^(L,pp)(x,x)` for on-sphere `x` at positions `0..outputs`.
pub fn border_profile(
    sigma: &Nonlinearity,
    beta: f64,
    depth: usize,
    parametrization: Parametrization,
    outputs: i64,
) -> Result<BorderProfile> {
    let r = sigma.characteristic_value(beta)?;
    let spec = border_spec(depth, outputs, parametrization);
    let g = spec.build_bounded()?;
    // Diagonals only see |x_q|², so a constant unit input is fully general.
    let x = InputField::new(1, vec![vec![1.0]; g.layer_size(0)])?;
    let mut ev = KernelEvaluator::new(&g, sigma, beta, vec![x])?;
    let mut rows = Vec::with_capacity(outputs as usize);
    for p in 0..g.layer_size(depth) {
        rows.push(BorderRow {
            position: g.layer(depth)[p][0],
            sigma_diag: ev.sigma(depth, 0, p, 0, p)?,
            ntk_diag: ev.ntk(depth, 0, p, 0, p)?,
        });
    }
    let closed = parametrization == Parametrization::Standard
        && sigma.is_relu()
        && sigma.shift() == 0.0
        && sigma.is_standardized()?;
    let (closed_form, max_err) = if closed {
        let mut table = Vec::with_capacity(depth);
        let mut err: f64 = 0.0;
        for l in 1..=depth {
            let origin = g.index_of(l, &[0; MAX_DIM]).expect("origin");
            let row = BorderClosedForm {
                layer: l,
                sigma_recursion: ev.sigma(l, 0, origin, 0, origin)?,
                sigma_closed: border_sigma_closed_form(beta, l),
                ntk_recursion: ev.ntk(l, 0, origin, 0, origin)?,
                ntk_closed: border_ntk_closed_form(beta, l),
            };
            err = err
                .max((row.sigma_recursion - row.sigma_closed).abs())
                .max((row.ntk_recursion - row.ntk_closed).abs());
            table.push(row);
        }
        (Some(table), Some(err))
    } else {
        (None, None)
    };
    Ok(BorderProfile {
        parametrization,
        depth,
        beta,
        r,
        rows,
        closed_form,
        max_closed_form_error: max_err,
    })
}

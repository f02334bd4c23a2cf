//! Gram matrices of NTKs over inputs and positions, their eigensystems and a
//! frequency decomposition of eigenvectors into checkerboard buckets.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dcnn::{weighted_ntk, DcnnSpec, InputSampler, LrMode};
use crate::error::{Error, Result};
use crate::fc_kernel::FcArchitecture;
use crate::finwidth::EmpiricalKernel;
use crate::netgraph::{Coord, InputField, KernelEvaluator, PositionGraph};
use crate::nonlin::Nonlinearity;

/// Absolute asymmetry tolerance, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Row label of a Gram matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GramIndex {
    pub input: usize,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub index: Vec<GramIndex>,
    /// Row-major `M × M`.
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn new(index: Vec<GramIndex>, values: Vec<f64>) -> Result<Self> {
        let m = index.len();
        if values.len() != m * m {
            return Err(Error::Dimension(format!(
                "{} entries for a {m}×{m} matrix",
                values.len()
            )));
        }
        Ok(Self { index, values })
    }

    pub fn size(&self) -> usize {
        self.index.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.size()).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Fill the upper triangle in parallel and mirror it.
pub fn assemble_with<F>(index: Vec<GramIndex>, f: F) -> Result<GramMatrix>
where
    F: Fn(GramIndex, GramIndex) -> Result<f64> + Sync,
{
    let m = index.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|(i, j)| {
            f(index[*i], index[*j]).map_err(|e| pair_error(e, index[*i], index[*j]))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; m * m];
    for ((i, j), v) in pairs.into_iter().zip(vals) {
        values[i * m + j] = v;
        values[j * m + i] = v;
    }
    GramMatrix::new(index, values)
}

fn pair_error(e: Error, a: GramIndex, b: GramIndex) -> Error {
    let at = format!(
        " at ({}, {}) × ({}, {})",
        a.input, a.position, b.input, b.position
    );
    match e {
        Error::Domain(m) => Error::Domain(m + &at),
        Error::Numerical(m) => Error::Numerical(m + &at),
        Error::Precondition(m) => Error::Precondition(m + &at),
        other => other,
    }
}

/// Limiting fully-connected NTK Gram over vectors on the `√n0`-sphere.
pub fn assemble_fc(arch: &FcArchitecture, inputs: &[Vec<f64>]) -> Result<GramMatrix> {
    let n0 = arch.n0;
    let index = (0..inputs.len()).map(|i| GramIndex { input: i, position: 0 }).collect();
    assemble_with(index, |a, b| {
        let rho = crate::fc_kernel::overlap(&inputs[a.input], &inputs[b.input], n0, false)?;
        arch.ntk(rho)
    })
}

/// Limiting graph NTK Gram over `inputs × positions` of the top layer.
/// `lr` applies layer-dependent learning rates with stride product `S`.
pub fn assemble_graph(
    graph: &PositionGraph,
    sigma: &Nonlinearity,
    beta: f64,
    inputs: Vec<InputField>,
    positions: &[usize],
    lr: Option<(LrMode, f64)>,
) -> Result<GramMatrix> {
    let depth = graph.depth();
    let count = inputs.len();
    let mut ev = KernelEvaluator::new(graph, sigma, beta, inputs)?;
    let index: Vec<GramIndex> = (0..count)
        .flat_map(|i| positions.iter().map(move |p| GramIndex { input: i, position: *p }))
        .collect();
    let m = index.len();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let (a, b) = (index[i], index[j]);
            let v = match lr {
                None => ev.ntk(depth, a.input, a.position, b.input, b.position),
                Some((mode, s)) => {
                    weighted_ntk(&mut ev, mode, s, a.input, a.position, b.input, b.position)
                }
            }
            .map_err(|e| pair_error(e, a, b))?;
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    GramMatrix::new(index, values)
}

/// Gram of an empirical kernel whose outputs all use one channel.
pub fn assemble_empirical(k: &EmpiricalKernel) -> Result<GramMatrix> {
    if k.outputs.windows(2).any(|w| w[0].channel != w[1].channel) {
        return Err(Error::Config("outputs mix channels".into()));
    }
    let index = k
        .outputs
        .iter()
        .map(|o| GramIndex { input: o.input, position: o.position })
        .collect();
    GramMatrix::new(index, k.values.clone())
}

/// `(1/M)·1ᵀK1`.
pub fn constant_rayleigh(k: &GramMatrix) -> f64 {
    k.values.iter().sum::<f64>() / k.size() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigensystem {
    /// Descending.
    pub values: Vec<f64>,
    /// `vectors[k]` is the unit eigenvector of `values[k]`, with its
    /// largest-magnitude component positive.
    pub vectors: Vec<Vec<f64>>,
}

impl Eigensystem {
    /// `‖K − VΛVᵀ‖_F`.
    pub fn reconstruction_error(&self, k: &GramMatrix) -> f64 {
        let m = k.size();
        let mut err = 0.0;
        for i in 0..m {
            for j in 0..m {
                let r: f64 = (0..m)
                    .map(|t| self.values[t] * self.vectors[t][i] * self.vectors[t][j])
                    .sum();
                err += (k.get(i, j) - r).powi(2);
            }
        }
        err.sqrt()
    }

    /// `max |VᵀV − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let m = self.vectors.len();
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in a..m {
                let d: f64 = self.vectors[a].iter().zip(&self.vectors[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - want).abs());
            }
        }
        worst
    }

    /// `λ₁/λ₂`, when `λ₂ > 0`.
    pub fn dominance_ratio(&self) -> Option<f64> {
        match self.values.as_slice() {
            [a, b, ..] if *b > 0.0 => Some(a / b),
            _ => None,
        }
    }
}

/// Symmetric eigendecomposition, descending, with deterministic signs.
pub fn eigendecompose(k: &GramMatrix) -> Result<Eigensystem> {
    let m = k.size();
    let scale = k.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if k.max_asymmetry() > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::Precondition(format!(
            "matrix is not symmetric (asymmetry {:.3e})",
            k.max_asymmetry()
        )));
    }
    if k.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Gram entry".into()));
    }
    if m == 0 {
        return Ok(Eigensystem { values: Vec::new(), vectors: Vec::new() });
    }
    let mat = DMatrix::from_row_slice(m, m, &k.values);
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|x, y| eig.eigenvalues[*y].total_cmp(&eig.eigenvalues[*x]));
    let values = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let vectors = order
        .iter()
        .map(|col| {
            let mut vec: Vec<f64> = eig.eigenvectors.column(*col).iter().copied().collect();
            let lead = vec
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            vec
        })
        .collect();
    Ok(Eigensystem { values, vectors })
}

/// A full box of positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionGrid {
    pub shape: Vec<usize>,
    pub origin: Vec<i64>,
    lookup: HashMap<Coord, usize>,
}

impl PositionGrid {
    /// Fails unless `coords` fill an axis-aligned box exactly once.
    pub fn from_coords(coords: &[Coord], dim: usize) -> Result<Self> {
        if coords.is_empty() || dim == 0 {
            return Err(Error::Config("empty position grid".into()));
        }
        let lo: Vec<i64> = (0..dim).map(|d| coords.iter().map(|c| c[d]).min().unwrap()).collect();
        let hi: Vec<i64> = (0..dim).map(|d| coords.iter().map(|c| c[d]).max().unwrap()).collect();
        let shape: Vec<usize> = (0..dim).map(|d| (hi[d] - lo[d] + 1) as usize).collect();
        let mut lookup = HashMap::new();
        for (i, c) in coords.iter().enumerate() {
            if lookup.insert(*c, i).is_some() {
                return Err(Error::Config(format!("duplicate position {c:?}")));
            }
        }
        if lookup.len() != shape.iter().product::<usize>() {
            return Err(Error::Config("positions do not fill a box".into()));
        }
        Ok(Self {
            shape,
            origin: lo,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major offset of `c` within the box.
    fn offset(&self, c: &Coord) -> usize {
        let mut o = 0;
        for (d, n) in self.shape.iter().enumerate() {
            o = o * n + (c[d] - self.origin[d]) as usize;
        }
        o
    }
}

/// Smallest `k` with `n | j·s^k`, or `None` when no power of `s` suffices.
fn period_exponent(j: usize, n: usize, s: usize) -> Option<u32> {
    let mut k = 0;
    let mut v = (j % n) as u128;
    let n = n as u128;
    while v % n != 0 {
        if k > 64 {
            return None;
        }
        v = (v * s as u128) % n;
        k += 1;
        if v == 0 {
            break;
        }
    }
    Some(k)
}

/// Bucket of a frequency: `L` for the constant mode, `k - 1` when the period
/// is `s^k` (capped at `L - 1`), and `L - 1` for periods that are not powers
/// of `s`. Along several axes the coarsest axis decides.
fn bucket(freq: &[usize], shape: &[usize], strides: &[usize], depth: usize) -> usize {
    if freq.iter().all(|f| *f == 0) {
        return depth;
    }
    let mut t = 0;
    for ((j, n), s) in freq.iter().zip(shape).zip(strides) {
        match period_exponent(*j, *n, *s) {
            Some(k) => t = t.max(k as usize),
            None => return depth - 1,
        }
    }
    (t.max(1) - 1).min(depth - 1)
}

/// Squared DFT magnitude of a position field per bucket `0..=L`. The buckets
/// sum to `‖values‖²`.
pub fn checkerboard_energy(
    values: &[f64],
    grid: &PositionGrid,
    coords: &[Coord],
    strides: &[i64],
    depth: usize,
) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::Config("depth must be positive".into()));
    }
    if values.len() != coords.len() || coords.len() != grid.len() {
        return Err(Error::Dimension("values do not cover the grid".into()));
    }
    if strides.len() != grid.shape.len() || strides.iter().any(|s| *s < 2) {
        return Err(Error::Config("one stride ≥ 2 per grid axis".into()));
    }
    let n = grid.len();
    let mut data = vec![Complex::new(0.0, 0.0); n];
    for (v, c) in values.iter().zip(coords) {
        let o = grid
            .lookup
            .get(c)
            .map(|_| grid.offset(c))
            .ok_or_else(|| Error::Config(format!("position {c:?} not in grid")))?;
        data[o] = Complex::new(*v, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    let dims = grid.shape.len();
    for axis in 0..dims {
        let len = grid.shape[axis];
        let inner: usize = grid.shape[axis + 1..].iter().product();
        let outer: usize = grid.shape[..axis].iter().product();
        let fft = planner.plan_fft_forward(len);
        let mut line = vec![Complex::new(0.0, 0.0); len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[(o * len + k) * inner + i];
                }
                fft.process(&mut line);
                for (k, slot) in line.iter().enumerate() {
                    data[(o * len + k) * inner + i] = *slot;
                }
            }
        }
    }
    let strides: Vec<usize> = strides.iter().map(|s| *s as usize).collect();
    let mut out = vec![0.0; depth + 1];
    let mut freq = vec![0usize; dims];
    for (flat, x) in data.iter().enumerate() {
        let mut rem = flat;
        for d in (0..dims).rev() {
            freq[d] = rem % grid.shape[d];
            rem /= grid.shape[d];
        }
        out[bucket(&freq, &grid.shape, &strides, depth)] += x.norm_sqr() / n as f64;
    }
    Ok(out)
}

/// Bucket energies of an eigenvector over `(input, position)`, summed over inputs.
pub fn eigenvector_energy(
    vector: &[f64],
    index: &[GramIndex],
    coords_of: &[Coord],
    strides: &[i64],
    depth: usize,
) -> Result<Vec<f64>> {
    let dim = strides.len();
    let mut by_input: HashMap<usize, (Vec<f64>, Vec<Coord>)> = HashMap::new();
    for (v, ix) in vector.iter().zip(index) {
        let e = by_input.entry(ix.input).or_default();
        e.0.push(*v);
        e.1.push(coords_of[ix.position]);
    }
    let mut total = vec![0.0; depth + 1];
    for (vals, coords) in by_input.values() {
        let grid = PositionGrid::from_coords(coords, dim)?;
        for (t, e) in total.iter_mut().zip(checkerboard_energy(vals, &grid, coords, strides, depth)?) {
            *t += e;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub index: Vec<GramIndex>,
    /// Coordinates of each row's position; empty without a position grid.
    pub coords: Vec<Coord>,
    pub constant_rayleigh: f64,
    /// Per eigenvector, buckets `0..=L`; empty without a position grid.
    pub checkerboard_energy: Vec<Vec<f64>>,
}

impl SpectrumReport {
    pub fn dominance_ratio(&self) -> Option<f64> {
        match self.eigenvalues.as_slice() {
            [a, b, ..] if *b > 0.0 => Some(a / b),
            _ => None,
        }
    }

    /// Energy of eigenvector `k` in buckets `≥ L-1`.
    pub fn high_valuation_energy(&self, k: usize) -> Option<f64> {
        let e = self.checkerboard_energy.get(k)?;
        let depth = e.len() - 1;
        Some(e[depth - 1..].iter().sum())
    }
}

/// Eigensystem plus, when `coords` of the top-layer positions are given,
/// bucket energies of every eigenvector.
pub fn spectrum(
    k: &GramMatrix,
    coords: Option<(&[Coord], &[i64], usize)>,
) -> Result<SpectrumReport> {
    let eig = eigendecompose(k)?;
    let checkerboard_energy = match coords {
        Some((c, strides, depth)) => eig
            .vectors
            .iter()
            .map(|v| eigenvector_energy(v, &k.index, c, strides, depth))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let coords = match coords {
        Some((c, _, _)) => k.index.iter().map(|ix| c[ix.position]).collect(),
        None => Vec::new(),
    };
    Ok(SpectrumReport {
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        index: k.index.clone(),
        coords,
        constant_rayleigh: constant_rayleigh(k),
        checkerboard_energy,
    })
}

/// The fixed order-versus-chaos configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPreset {
    pub spec: DcnnSpec,
    pub outputs: usize,
    pub inputs: usize,
    pub n0: usize,
}

impl Default for SpectrumPreset {
    fn default() -> Self {
        Self {
            spec: DcnnSpec::new(vec![2], vec![2], 3).expect("valid preset"),
            outputs: 16,
            inputs: 4,
            n0: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetRun {
    pub seed: u64,
    pub order: SpectrumReport,
    pub chaos: SpectrumReport,
    pub order_high: f64,
    pub chaos_high: f64,
}

impl PresetRun {
    pub fn separated(&self) -> bool {
        self.order_high > self.chaos_high
    }
}

impl SpectrumPreset {
    pub fn coords(&self) -> Vec<Coord> {
        (0..self.outputs as i64).map(|p| [p, 0, 0]).collect()
    }

    /// Input `i` of seed `seed` samples each position independently on the sphere.
    pub fn fields(&self, graph: &PositionGraph, seed: u64) -> Result<Vec<InputField>> {
        (0..self.inputs as u64)
            .map(|i| {
                InputSampler {
                    n0: self.n0,
                    seed: seed.wrapping_mul(1_000_003).wrapping_add(i),
                }
                .field(graph)
            })
            .collect()
    }

    pub fn spectrum(
        &self,
        sigma: &Nonlinearity,
        beta: f64,
        seed: u64,
        lr: Option<LrMode>,
    ) -> Result<SpectrumReport> {
        let coords = self.coords();
        let graph = self.spec.build_borderless(&coords)?;
        let depth = self.spec.depth;
        let positions: Vec<usize> = coords
            .iter()
            .map(|c| graph.index_of(depth, c).expect("output in graph"))
            .collect();
        let fields = self.fields(&graph, seed)?;
        let lr = lr.map(|m| (m, self.spec.stride_product()));
        let k = assemble_graph(&graph, sigma, beta, fields, &positions, lr)?;
        let top: Vec<Coord> = graph.layer(depth).to_vec();
        spectrum(&k, Some((&top, &self.spec.strides, depth)))
    }

    /// Standardized ReLU with β = 0.5 against normalized ReLU with β = 0.1.
    pub fn run(&self, seed: u64) -> Result<PresetRun> {
        let order = self.spectrum(&Nonlinearity::standardized_relu(), 0.5, seed, None)?;
        let chaos = self.spectrum(&Nonlinearity::normalized_relu(), 0.1, seed, None)?;
        Ok(PresetRun {
            seed,
            order_high: order.high_valuation_energy(0).unwrap_or(0.0),
            chaos_high: chaos.high_valuation_energy(0).unwrap_or(0.0),
            order,
            chaos,
        })
    }
}

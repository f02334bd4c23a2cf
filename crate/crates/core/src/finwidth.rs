//! Finite-width networks: sampling, forward passes, exact parameter gradients
//! and empirical NTKs, plus Monte Carlo comparisons with the limiting kernels.
//!
//! Layer `ℓ+1` preactivations at position `p` are
//!
//! ```text
//! α̃(p) = β·b^(ℓ) + √(1-β²)/√(m_p·n_ℓ) · Σ_{q ∈ P(p)} W^(ℓ, class(q→p)) α(q)
//! ```
//!
//! with `m_p` the parent count (or the fixed fan-in). Every array is laid out
//! as `[input][position][channel]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fc_kernel::FcArchitecture;
use crate::fit::{log_fit, LineFit};
use crate::netgraph::{EdgeNormalization, InputField, ParamKind, PositionGraph};
use crate::nonlin::{check_beta, Nonlinearity, Shape};

/// Identifies the parameter generator in run metadata.
pub const PRNG_VERSION: &str = "chacha8 (rand_chacha 0.9), one stream per (layer, kind, class, row); rand_distr 0.5 StandardNormal";

/// Derivative convention recorded in metadata.
pub const KINK_CONVENTION: &str = "relu'(0) = 0";

/// Relative spread below which a normalization group counts as degenerate.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Normalization applied at a hidden layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormLayer {
    #[default]
    None,
    /// Layer norm over channels of `σ(α̃)`.
    LnPost,
    /// `σ(LN(α̃))`.
    LnPre,
    /// Batch norm of `σ(α̃)` over the batch, per position and channel.
    BnPost,
}

/// One scalar network output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutputIndex {
    pub input: usize,
    pub position: usize,
    pub channel: usize,
}

impl OutputIndex {
    pub fn new(input: usize, position: usize, channel: usize) -> Self {
        Self {
            input,
            position,
            channel,
        }
    }
}

/// A sampled network. Parameters are immutable unless set explicitly.
#[derive(Clone, Debug)]
pub struct FiniteNet {
    graph: PositionGraph,
    sigma: Nonlinearity,
    beta: f64,
    widths: Vec<usize>,
    norms: Vec<NormLayer>,
    seed: u64,
    /// `weights[ℓ][class]`: `n_{ℓ+1} × n_ℓ`, row-major.
    weights: Vec<Vec<Vec<f64>>>,
    /// `biases[ℓ]`: length `n_{ℓ+1}`, shared by all positions of layer `ℓ+1`.
    biases: Vec<Vec<f64>>,
}

/// One weight application `W^(class) α(b, q)` feeding `α̃(b, p)`.
#[derive(Clone, Copy, Debug)]
struct Term {
    b: usize,
    p: usize,
    q: usize,
    scale: f64,
}

fn stream_id(layer: usize, kind: ParamKind, class: usize, row: usize) -> u64 {
    let k = matches!(kind, ParamKind::Bias) as u64;
    ((layer as u64) << 56) | (k << 55) | ((class as u64) << 32) | row as u64
}

fn normal_row(seed: u64, stream: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FiniteNet {
    /// Draw all parameters i.i.d. `N(0, 1)`; `widths` lists `n_0..n_L`.
    pub fn sample(
        graph: PositionGraph,
        sigma: Nonlinearity,
        beta: f64,
        widths: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        check_beta(beta)?;
        let depth = graph.depth();
        if widths.len() != depth + 1 {
            return Err(Error::Config(format!(
                "{} widths for a depth-{depth} network (need {})",
                widths.len(),
                depth + 1
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 0..depth {
            let (rows, cols) = (widths[l + 1], widths[l]);
            let classes = (0..graph.class_count(l))
                .map(|c| {
                    (0..rows)
                        .into_par_iter()
                        .flat_map_iter(|r| {
                            normal_row(seed, stream_id(l, ParamKind::Weight, c, r), cols)
                        })
                        .collect()
                })
                .collect();
            weights.push(classes);
            biases.push(normal_row(seed, stream_id(l, ParamKind::Bias, 0, 0), rows));
        }
        Ok(Self {
            graph,
            sigma,
            beta,
            norms: vec![NormLayer::None; depth + 1],
            widths,
            seed,
            weights,
            biases,
        })
    }

    /// Fully-connected network: a single-position chain.
    pub fn fc(sigma: Nonlinearity, beta: f64, widths: Vec<usize>, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("need at least input and output widths".into()));
        }
        let graph = PositionGraph::chain(widths.len() - 1)?;
        Self::sample(graph, sigma, beta, widths, seed)
    }

    /// Put a normalization at hidden layer `layer ∈ 1..L`.
    pub fn with_norm(mut self, layer: usize, norm: NormLayer) -> Result<Self> {
        if layer == 0 || layer >= self.depth() {
            return Err(Error::Config(format!(
                "normalization allowed on hidden layers 1..{}, got {layer}",
                self.depth() - 1
            )));
        }
        self.norms[layer] = norm;
        Ok(self)
    }

    /// Same norm at every hidden layer.
    pub fn with_norm_everywhere(mut self, norm: NormLayer) -> Self {
        let depth = self.depth();
        for n in &mut self.norms[1..depth] {
            *n = norm;
        }
        self
    }

    /// Same parameters under another nonlinearity.
    pub fn with_sigma(mut self, sigma: Nonlinearity) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn graph(&self) -> &PositionGraph {
        &self.graph
    }

    pub fn sigma(&self) -> &Nonlinearity {
        &self.sigma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn depth(&self) -> usize {
        self.graph.depth()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn norms(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight(&self, layer: usize, class: usize) -> &[f64] {
        &self.weights[layer][class]
    }

    pub fn weight_mut(&mut self, layer: usize, class: usize) -> &mut [f64] {
        &mut self.weights[layer][class]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.depth())
            .map(|l| {
                self.graph.class_count(l) * self.widths[l] * self.widths[l + 1]
                    + self.widths[l + 1]
            })
            .sum()
    }

    /// Flattened parameters: per layer, every weight class then the bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for c in w {
                out.extend_from_slice(c);
            }
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.parameter_count() {
            return Err(Error::Dimension(format!(
                "{} parameters given, network has {}",
                theta.len(),
                self.parameter_count()
            )));
        }
        let mut it = theta.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for c in w.iter_mut() {
                c.iter_mut().for_each(|v| *v = it.next().unwrap());
            }
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn edge_scale(&self, layer: usize, p: usize) -> f64 {
        // layer is the produced layer, ≥ 1.
        let m = match self.graph.normalization() {
            EdgeNormalization::ParentCount => self.graph.parents(layer, p).len() as f64,
            EdgeNormalization::Fixed { fan_in } => fan_in,
        };
        ((1.0 - self.beta * self.beta) / (m * self.widths[layer - 1] as f64)).sqrt()
    }

    /// Terms of class `c` feeding layer `l+1`, for batch size `batch`.
    fn terms(&self, l: usize, batch: usize) -> Vec<Vec<Term>> {
        let mut out = vec![Vec::new(); self.graph.class_count(l)];
        for b in 0..batch {
            for p in 0..self.graph.layer_size(l + 1) {
                let scale = self.edge_scale(l + 1, p);
                for e in self.graph.parents(l + 1, p) {
                    out[e.class].push(Term {
                        b,
                        p,
                        q: e.parent,
                        scale,
                    });
                }
            }
        }
        out
    }

    fn check_inputs(&self, inputs: &[InputField]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Config("no inputs".into()));
        }
        for x in inputs {
            if x.n0 != self.widths[0] || x.values.len() != self.graph.layer_size(0) {
                return Err(Error::Dimension(format!(
                    "input with {} positions of {} channels; network expects {} of {}",
                    x.values.len(),
                    x.n0,
                    self.graph.layer_size(0),
                    self.widths[0]
                )));
            }
        }
        if self.norms.contains(&NormLayer::BnPost) && inputs.len() < 2 {
            return Err(Error::Precondition("batch norm needs a batch of at least 2".into()));
        }
        Ok(())
    }

    /// Forward pass of a batch. With batch norm the inputs form the batch;
    /// otherwise they are processed independently.
    pub fn forward(&self, inputs: &[InputField]) -> Result<Forward> {
        self.check_inputs(inputs)?;
        let depth = self.depth();
        let batch = inputs.len();
        let mut pre = vec![Vec::new(); depth + 1];
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut cache = vec![None; depth + 1];
        let mut kink_hits = 0;
        post.push(inputs.iter().flat_map(|x| x.values.iter().flatten().copied()).collect());
        for l in 0..depth {
            let z = self.linear(l, &post[l], batch);
            if l + 1 == depth {
                pre[depth] = z;
                break;
            }
            let n = self.widths[l + 1];
            let norm = self.norms[l + 1];
            let relu = matches!(self.sigma.shape(), Shape::Relu);
            let count_kinks = |v: &[f64]| if relu { v.iter().filter(|x| **x == 0.0).count() } else { 0 };
            let a = match norm {
                NormLayer::None => {
                    kink_hits += count_kinks(&z);
                    z.iter().map(|x| self.sigma.eval(*x)).collect()
                }
                NormLayer::LnPre => {
                    let c = normalize_groups(&z, n, 1, z.len() / n)?;
                    kink_hits += count_kinks(&c.y);
                    let a = c.y.iter().map(|x| self.sigma.eval(*x)).collect();
                    cache[l + 1] = Some(c);
                    a
                }
                NormLayer::LnPost | NormLayer::BnPost => {
                    kink_hits += count_kinks(&z);
                    let u: Vec<f64> = z.iter().map(|x| self.sigma.eval(*x)).collect();
                    let c = if norm == NormLayer::LnPost {
                        normalize_groups(&u, n, 1, u.len() / n)?
                    } else {
                        let stride = u.len() / batch;
                        normalize_groups(&u, batch, stride, stride)?
                    };
                    let a = c.y.clone();
                    cache[l + 1] = Some(c);
                    a
                }
            };
            pre[l + 1] = z;
            post.push(a);
        }
        if pre[depth].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(Forward {
            batch,
            positions: (0..=depth).map(|l| self.graph.layer_size(l)).collect(),
            widths: self.widths.clone(),
            pre,
            post,
            cache,
            kink_hits,
        })
    }

    /// `α̃^(l+1)` from the layer-`l` activations `a`.
    fn linear(&self, l: usize, a: &[f64], batch: usize) -> Vec<f64> {
        let (rows, cols) = (self.widths[l + 1], self.widths[l]);
        let np = self.graph.layer_size(l + 1);
        let nq = self.graph.layer_size(l);
        let mut out = vec![0.0; batch * np * rows];
        for chunk in out.chunks_mut(rows) {
            for (o, b) in chunk.iter_mut().zip(&self.biases[l]) {
                *o = self.beta * b;
            }
        }
        for (c, terms) in self.terms(l, batch).iter().enumerate() {
            if terms.is_empty() {
                continue;
            }
            let w = &self.weights[l][c];
            // products[r][t] = W_r · α(b_t, q_t)
            let products: Vec<f64> = w
                .par_chunks(cols)
                .flat_map_iter(|row| {
                    terms.iter().map(move |t| {
                        let start = (t.b * nq + t.q) * cols;
                        dot(row, &a[start..start + cols])
                    })
                })
                .collect();
            for r in 0..rows {
                for (t, v) in terms.iter().zip(&products[r * terms.len()..]) {
                    out[(t.b * np + t.p) * rows + r] += t.scale * v;
                }
            }
        }
        out
    }

    /// `∂/∂α^(l)` given `∂/∂α̃^(l+1)`.
    fn linear_backward(&self, l: usize, g: &[f64], batch: usize) -> Vec<f64> {
        let (rows, cols) = (self.widths[l + 1], self.widths[l]);
        let np = self.graph.layer_size(l + 1);
        let nq = self.graph.layer_size(l);
        let mut out = vec![0.0; batch * nq * cols];
        let live: Vec<bool> = g.chunks(rows).map(|v| v.iter().any(|x| *x != 0.0)).collect();
        for (c, terms) in self.terms(l, batch).iter().enumerate() {
            let terms: Vec<Term> =
                terms.iter().copied().filter(|t| live[t.b * np + t.p]).collect();
            if terms.is_empty() {
                continue;
            }
            let w = &self.weights[l][c];
            let block = 256.min(cols);
            let pieces: Vec<(usize, Vec<f64>)> = (0..cols)
                .step_by(block)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let end = (start + block).min(cols);
                    let len = end - start;
                    let mut acc = vec![0.0; terms.len() * len];
                    for r in 0..rows {
                        let wr = &w[r * cols + start..r * cols + end];
                        for (k, t) in terms.iter().enumerate() {
                            let coef = t.scale * g[(t.b * np + t.p) * rows + r];
                            if coef != 0.0 {
                                for (o, x) in acc[k * len..(k + 1) * len].iter_mut().zip(wr) {
                                    *o += coef * x;
                                }
                            }
                        }
                    }
                    (start, acc)
                })
                .collect();
            for (start, acc) in pieces {
                let len = acc.len() / terms.len();
                for (k, t) in terms.iter().enumerate() {
                    let base = (t.b * nq + t.q) * cols + start;
                    for (o, x) in out[base..base + len].iter_mut().zip(&acc[k * len..]) {
                        *o += x;
                    }
                }
            }
        }
        out
    }

    /// `∂f_out/∂α̃^(ℓ)` for `ℓ = 1..=L` (index 0 unused).
    fn deltas(&self, fwd: &Forward, out: OutputIndex) -> Result<Vec<Vec<f64>>> {
        let depth = self.depth();
        let batch = fwd.batch;
        if out.input >= batch
            || out.position >= self.graph.layer_size(depth)
            || out.channel >= self.widths[depth]
        {
            return Err(Error::Dimension(format!("output {out:?} out of range")));
        }
        let mut d = vec![Vec::new(); depth + 1];
        let mut top = vec![0.0; fwd.pre[depth].len()];
        top[fwd.index(depth, out.input, out.position, out.channel)] = 1.0;
        d[depth] = top;
        for l in (1..depth).rev() {
            let da = self.linear_backward(l, &d[l + 1], batch);
            let z = &fwd.pre[l];
            let n = self.widths[l];
            let grad = match self.norms[l] {
                NormLayer::None => z.iter().zip(&da).map(|(x, g)| self.sigma.derivative(*x) * g).collect(),
                NormLayer::LnPost => {
                    let du = fwd.cache[l].as_ref().unwrap().backward(&da, n, 1, z.len() / n);
                    z.iter().zip(&du).map(|(x, g)| self.sigma.derivative(*x) * g).collect()
                }
                NormLayer::BnPost => {
                    let stride = z.len() / batch;
                    let du = fwd.cache[l].as_ref().unwrap().backward(&da, batch, stride, stride);
                    z.iter().zip(&du).map(|(x, g)| self.sigma.derivative(*x) * g).collect()
                }
                NormLayer::LnPre => {
                    let c = fwd.cache[l].as_ref().unwrap();
                    let dz: Vec<f64> =
                        c.y.iter().zip(&da).map(|(x, g)| self.sigma.derivative(*x) * g).collect();
                    c.backward(&dz, n, 1, z.len() / n)
                }
            };
            d[l] = grad;
        }
        Ok(d)
    }

    /// Exact gradient of one output with respect to [`FiniteNet::parameters`].
    pub fn gradient(&self, inputs: &[InputField], out: OutputIndex) -> Result<Vec<f64>> {
        let fwd = self.forward(inputs)?;
        let d = self.deltas(&fwd, out)?;
        let mut g = Vec::with_capacity(self.parameter_count());
        for l in 0..self.depth() {
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let (np, nq) = (self.graph.layer_size(l + 1), self.graph.layer_size(l));
            for terms in self.terms(l, fwd.batch) {
                let mut w = vec![0.0; rows * cols];
                for t in terms {
                    let dv = &d[l + 1][(t.b * np + t.p) * rows..][..rows];
                    let av = &fwd.post[l][(t.b * nq + t.q) * cols..][..cols];
                    for (r, dr) in dv.iter().enumerate() {
                        if *dr != 0.0 {
                            for (o, a) in w[r * cols..(r + 1) * cols].iter_mut().zip(av) {
                                *o += t.scale * dr * a;
                            }
                        }
                    }
                }
                g.extend(w);
            }
            g.extend(bias_gradient(&d[l + 1], rows, self.beta));
        }
        Ok(g)
    }

    /// Empirical NTK `Σ_θ ∂_θ f_o ∂_θ f_o'` over the requested outputs, with
    /// per-layer weight and bias contributions. With batch norm every output
    /// depends on the whole batch and is differentiated through it.
    pub fn empirical_ntk(
        &self,
        inputs: &[InputField],
        outputs: &[OutputIndex],
    ) -> Result<EmpiricalKernel> {
        if outputs.is_empty() {
            return Err(Error::Config("no outputs requested".into()));
        }
        let fwd = self.forward(inputs)?;
        let deltas: Vec<Vec<Vec<f64>>> = outputs
            .par_iter()
            .map(|o| self.deltas(&fwd, *o))
            .collect::<Result<_>>()?;
        let m = outputs.len();
        let pairs: Vec<(usize, usize)> =
            (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
        let mut layerwise = Vec::new();
        let mut total = vec![0.0; m * m];
        for l in 0..self.depth() {
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let np = self.graph.layer_size(l + 1);
            let nq = self.graph.layer_size(l);
            let mut weight = vec![0.0; m * m];
            for terms in self.terms(l, fwd.batch) {
                // Only terms whose output gradient is nonzero contribute.
                let live: Vec<Vec<Term>> = deltas
                    .iter()
                    .map(|d| {
                        terms
                            .iter()
                            .copied()
                            .filter(|t| {
                                d[l + 1][(t.b * np + t.p) * rows..][..rows]
                                    .iter()
                                    .any(|x| *x != 0.0)
                            })
                            .collect()
                    })
                    .collect();
                let size = (rows * cols) as f64;
                let counts: Vec<f64> = live.iter().map(|t| t.len() as f64).collect();
                let factored: f64 = pairs
                    .iter()
                    .map(|(i, j)| counts[*i] * counts[*j] * (rows + cols) as f64)
                    .sum();
                let explicit =
                    counts.iter().sum::<f64>() * size + pairs.len() as f64 * size;
                let memory_ok = m as f64 * size <= 5e7;
                let values: Vec<f64> = if explicit < factored && memory_ok {
                    let mats: Vec<Vec<f64>> = live
                        .par_iter()
                        .zip(&deltas)
                        .map(|(ts, d)| {
                            let mut w = vec![0.0; rows * cols];
                            for t in ts {
                                let dv = &d[l + 1][(t.b * np + t.p) * rows..][..rows];
                                let av = &fwd.post[l][(t.b * nq + t.q) * cols..][..cols];
                                for (r, dr) in dv.iter().enumerate() {
                                    for (o, a) in w[r * cols..(r + 1) * cols].iter_mut().zip(av) {
                                        *o += t.scale * dr * a;
                                    }
                                }
                            }
                            w
                        })
                        .collect();
                    pairs.par_iter().map(|(i, j)| dot(&mats[*i], &mats[*j])).collect()
                } else {
                    pairs
                        .par_iter()
                        .map(|(i, j)| {
                            let mut s = 0.0;
                            for t in &live[*i] {
                                let dt = &deltas[*i][l + 1][(t.b * np + t.p) * rows..][..rows];
                                let at = &fwd.post[l][(t.b * nq + t.q) * cols..][..cols];
                                for u in &live[*j] {
                                    let du = &deltas[*j][l + 1][(u.b * np + u.p) * rows..][..rows];
                                    let au = &fwd.post[l][(u.b * nq + u.q) * cols..][..cols];
                                    s += t.scale * u.scale * dot(dt, du) * dot(at, au);
                                }
                            }
                            s
                        })
                        .collect()
                };
                for ((i, j), v) in pairs.iter().zip(values) {
                    weight[i * m + j] += v;
                    if i != j {
                        weight[j * m + i] += v;
                    }
                }
            }
            let grads: Vec<Vec<f64>> =
                deltas.iter().map(|d| bias_gradient(&d[l + 1], rows, self.beta)).collect();
            let mut bias = vec![0.0; m * m];
            for (i, j) in &pairs {
                let v = dot(&grads[*i], &grads[*j]);
                bias[i * m + j] = v;
                bias[j * m + i] = v;
            }
            for k in 0..m * m {
                total[k] += weight[k] + bias[k];
            }
            layerwise.push(LayerContribution {
                layer: l,
                kind: ParamKind::Weight,
                values: weight,
            });
            layerwise.push(LayerContribution {
                layer: l,
                kind: ParamKind::Bias,
                values: bias,
            });
        }
        Ok(EmpiricalKernel {
            outputs: outputs.to_vec(),
            values: total,
            layerwise,
            meta: self.meta(fwd.batch, fwd.kink_hits),
        })
    }

    pub fn meta(&self, batch: usize, kink_hits: usize) -> RunMeta {
        RunMeta {
            widths: self.widths.clone(),
            seed: self.seed,
            beta: self.beta,
            sigma: self.sigma.kind().to_string(),
            norms: self.norms.clone(),
            batch,
            prng: PRNG_VERSION.into(),
            kink_convention: KINK_CONVENTION.into(),
            kink_hits,
        }
    }
}

fn bias_gradient(d: &[f64], rows: usize, beta: f64) -> Vec<f64> {
    let mut g = vec![0.0; rows];
    for chunk in d.chunks(rows) {
        for (o, x) in g.iter_mut().zip(chunk) {
            *o += beta * x;
        }
    }
    g
}

/// Normalized values `y = (u - mean)/s` and the spread `s` per group, where
/// `s` is the root mean square of the centered group.
#[derive(Clone, Debug)]
struct NormCache {
    y: Vec<f64>,
    s: Vec<f64>,
}

/// Group `k` holds `v[base(k) + i·stride]` for `i < len`, where groups are
/// contiguous runs of `len` (stride 1) or interleaved columns (stride > 1).
fn group_index(k: usize, i: usize, len: usize, stride: usize) -> usize {
    if stride == 1 {
        k * len + i
    } else {
        k + i * stride
    }
}

fn normalize_groups(v: &[f64], len: usize, stride: usize, groups: usize) -> Result<NormCache> {
    let mut y = vec![0.0; v.len()];
    let mut s = vec![0.0; groups];
    for k in 0..groups {
        let idx = |i| group_index(k, i, len, stride);
        let mean = (0..len).map(|i| v[idx(i)]).sum::<f64>() / len as f64;
        let var = (0..len).map(|i| (v[idx(i)] - mean).powi(2)).sum::<f64>() / len as f64;
        let spread = var.sqrt();
        let size = (0..len).map(|i| v[idx(i)].abs()).fold(0.0, f64::max);
        if !(spread > DEGENERATE_SPREAD * size.max(1.0)) {
            return Err(Error::Numerical(format!(
                "normalization group {k} has zero variance"
            )));
        }
        for i in 0..len {
            y[idx(i)] = (v[idx(i)] - mean) / spread;
        }
        s[k] = spread;
    }
    Ok(NormCache { y, s })
}

impl NormCache {
    /// `∂/∂u` from `∂/∂y`: `(g - mean(g) - y·mean(y∘g)) / s` per group.
    fn backward(&self, g: &[f64], len: usize, stride: usize, groups: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for k in 0..groups {
            let idx = |i| group_index(k, i, len, stride);
            let mg = (0..len).map(|i| g[idx(i)]).sum::<f64>() / len as f64;
            let myg = (0..len).map(|i| g[idx(i)] * self.y[idx(i)]).sum::<f64>() / len as f64;
            for i in 0..len {
                out[idx(i)] = (g[idx(i)] - mg - self.y[idx(i)] * myg) / self.s[k];
            }
        }
        out
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    batch: usize,
    positions: Vec<usize>,
    widths: Vec<usize>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    cache: Vec<Option<NormCache>>,
    /// Preactivations that hit the ReLU kink exactly.
    pub kink_hits: usize,
}

impl Forward {
    fn index(&self, l: usize, b: usize, p: usize, ch: usize) -> usize {
        (b * self.positions[l] + p) * self.widths[l] + ch
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Preactivation vector `α̃^(l)(x_b, p)`, `l ≥ 1`.
    pub fn pre(&self, l: usize, b: usize, p: usize) -> &[f64] {
        let i = self.index(l, b, p, 0);
        &self.pre[l][i..i + self.widths[l]]
    }

    /// Activation vector fed to layer `l+1` (after any normalization), `l < L`.
    pub fn post(&self, l: usize, b: usize, p: usize) -> &[f64] {
        let i = self.index(l, b, p, 0);
        &self.post[l][i..i + self.widths[l]]
    }

    pub fn output(&self, o: OutputIndex) -> f64 {
        let depth = self.pre.len() - 1;
        self.pre[depth][self.index(depth, o.input, o.position, o.channel)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub beta: f64,
    pub sigma: String,
    pub norms: Vec<NormLayer>,
    pub batch: usize,
    pub prng: String,
    pub kink_convention: String,
    pub kink_hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerContribution {
    pub layer: usize,
    pub kind: ParamKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalKernel {
    pub outputs: Vec<OutputIndex>,
    /// `M × M`, row-major over `outputs`.
    pub values: Vec<f64>,
    pub layerwise: Vec<LayerContribution>,
    pub meta: RunMeta,
}

impl EmpiricalKernel {
    pub fn size(&self) -> usize {
        self.outputs.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn contribution(&self, layer: usize, kind: ParamKind) -> Option<&[f64]> {
        self.layerwise
            .iter()
            .find(|c| c.layer == layer && c.kind == kind)
            .map(|c| c.values.as_slice())
    }
}

/// Constant-mode statistics of an `N × N` NTK Gram matrix on a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayleighReport {
    pub batch: usize,
    pub beta: f64,
    pub batch_norm: bool,
    /// `(1/N)·1ᵀΘ̃1`.
    pub rayleigh: f64,
    /// `(1/N²)·1ᵀΘ̃1`, the mean Gram entry.
    pub mean_entry: f64,
    pub gram: Vec<f64>,
    pub meta: RunMeta,
}

impl RayleighReport {
    /// With batch norm after the last nonlinearity every parameter's summed
    /// gradient over the batch vanishes except the last bias, whose per-input
    /// gradient is `β`. That pins the mean entry to `β²` and the quotient to `Nβ²`.
    pub fn predicted_rayleigh(&self) -> f64 {
        self.batch as f64 * self.beta * self.beta
    }

    pub fn mean_entry_error(&self) -> f64 {
        (self.mean_entry - self.beta * self.beta).abs()
    }

    pub fn rayleigh_error(&self) -> f64 {
        (self.rayleigh - self.predicted_rayleigh()).abs()
    }
}

/// Constant Rayleigh quotient of the empirical Gram over `batch` at output
/// position 0, channel 0.
pub fn constant_rayleigh(net: &FiniteNet, batch: &[InputField]) -> Result<RayleighReport> {
    if batch.len() < 2 {
        return Err(Error::Precondition("need a batch of at least 2".into()));
    }
    let outputs: Vec<OutputIndex> = (0..batch.len()).map(|i| OutputIndex::new(i, 0, 0)).collect();
    let k = net.empirical_ntk(batch, &outputs)?;
    let n = batch.len() as f64;
    let sum: f64 = k.values.iter().sum();
    Ok(RayleighReport {
        batch: batch.len(),
        beta: net.beta(),
        batch_norm: net.norms().get(net.depth() - 1) == Some(&NormLayer::BnPost),
        rayleigh: sum / n,
        mean_entry: sum / (n * n),
        gram: k.values,
        meta: k.meta,
    })
}

/// [`constant_rayleigh`] on a network with batch norm after its last nonlinearity.
pub fn bn_rayleigh_check(net: &FiniteNet, batch: &[InputField]) -> Result<RayleighReport> {
    if net.depth() < 2 || net.norms()[net.depth() - 1] != NormLayer::BnPost {
        return Err(Error::Precondition(
            "network needs batch norm after the last nonlinearity".into(),
        ));
    }
    constant_rayleigh(net, batch)
}

/// A point at overlap `ρ` with `e₁·√n0` on the `√n0`-sphere (needs `n0 ≥ 2`).
pub fn sphere_pair(n0: usize, rho: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n0 < 2 {
        return Err(Error::Config("need n0 ≥ 2 for a pair at given overlap".into()));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("overlap {rho} outside [-1, 1]")));
    }
    let r = (n0 as f64).sqrt();
    let mut x = vec![0.0; n0];
    let mut y = vec![0.0; n0];
    x[0] = r;
    y[0] = r * rho;
    y[1] = r * (1.0 - rho * rho).max(0.0).sqrt();
    Ok((x, y))
}

/// Single-position fields `[x, y_ρ1, y_ρ2, ...]`.
fn overlap_batch(n0: usize, rhos: &[f64]) -> Result<Vec<InputField>> {
    let (x, _) = sphere_pair(n0, 1.0)?;
    let mut out = vec![InputField::new(n0, vec![x])?];
    for rho in rhos {
        out.push(InputField::new(n0, vec![sphere_pair(n0, *rho)?.1])?);
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Monte Carlo comparison of fully-connected empirical NTKs with the limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub sigma: Nonlinearity,
    pub beta: f64,
    pub depth: usize,
    pub n0: usize,
    /// Hidden widths; the output has one channel.
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    /// Overlaps of the second input with `x`; `Θ(x, x)` is always included.
    pub rhos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub width: usize,
    pub seed: u64,
    /// Empirical `Θ(x, y_ρ)` with `ρ = 1` first, then `rhos` in order.
    pub values: Vec<f64>,
    pub kink_hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub width: usize,
    pub rho: f64,
    pub limit: f64,
    pub mean_abs_error: f64,
    pub sd_abs_error: f64,
    pub median_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub rows: Vec<McRow>,
    /// Per width: the mean absolute error over seeds and entries.
    pub error_by_width: Vec<(usize, f64)>,
    /// Per width: the median relative error over seeds and entries.
    pub median_rel_by_width: Vec<(usize, f64)>,
    /// `log(error)` against `log(width)`.
    pub slope: Option<LineFit>,
    pub cells: Vec<McCell>,
    pub prng: String,
}

pub fn mc_sweep(cfg: &McConfig) -> Result<McReport> {
    if cfg.widths.is_empty() || cfg.seeds == 0 || cfg.depth == 0 {
        return Err(Error::Config("need widths, seeds and a positive depth".into()));
    }
    let arch = FcArchitecture::new(cfg.sigma.clone(), cfg.beta, cfg.depth, cfg.n0)?;
    let mut rhos = vec![1.0];
    rhos.extend(&cfg.rhos);
    let limits: Vec<f64> = rhos.iter().map(|r| arch.ntk(*r)).collect::<Result<_>>()?;
    let batch = overlap_batch(cfg.n0, &cfg.rhos)?;
    let outputs: Vec<OutputIndex> = (0..batch.len()).map(|i| OutputIndex::new(i, 0, 0)).collect();
    let jobs: Vec<(usize, u64)> = cfg
        .widths
        .iter()
        .flat_map(|w| (0..cfg.seeds as u64).map(move |s| (*w, cfg.base_seed.wrapping_add(s))))
        .collect();
    let cells: Vec<McCell> = jobs
        .par_iter()
        .map(|(width, seed)| {
            let mut widths = vec![cfg.n0];
            widths.extend(std::iter::repeat_n(*width, cfg.depth - 1));
            widths.push(1);
            let net = FiniteNet::fc(cfg.sigma.clone(), cfg.beta, widths, *seed)?;
            let k = net.empirical_ntk(&batch, &outputs)?;
            Ok(McCell {
                width: *width,
                seed: *seed,
                values: (0..rhos.len()).map(|j| k.get(0, j)).collect(),
                kink_hits: k.meta.kink_hits,
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut error_by_width = Vec::new();
    let mut median_rel_by_width = Vec::new();
    for w in &cfg.widths {
        let mine: Vec<&McCell> = cells.iter().filter(|c| c.width == *w).collect();
        let mut all_abs = Vec::new();
        let mut all_rel = Vec::new();
        for (j, (rho, limit)) in rhos.iter().zip(&limits).enumerate() {
            let abs: Vec<f64> = mine.iter().map(|c| (c.values[j] - limit).abs()).collect();
            let rel: Vec<f64> = abs.iter().map(|a| a / limit.abs()).collect();
            let (m, sd) = mean_sd(&abs);
            rows.push(McRow {
                width: *w,
                rho: *rho,
                limit: *limit,
                mean_abs_error: m,
                sd_abs_error: sd,
                median_rel_error: median(rel.clone()),
            });
            all_abs.extend(abs);
            all_rel.extend(rel);
        }
        error_by_width.push((*w, mean_sd(&all_abs).0));
        median_rel_by_width.push((*w, median(all_rel)));
    }
    let lx: Vec<f64> = error_by_width.iter().map(|(w, _)| (*w as f64).ln()).collect();
    let ev: Vec<f64> = error_by_width.iter().map(|(_, e)| *e).collect();
    Ok(McReport {
        rows,
        slope: log_fit(&lx, &ev, 0.0),
        error_by_width,
        median_rel_by_width,
        cells,
        prng: PRNG_VERSION.into(),
    })
}

/// Compares layer-normalized networks with their claimed equivalents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnConfig {
    pub sigma: Nonlinearity,
    pub beta: f64,
    pub depth: usize,
    pub n0: usize,
    /// Hidden and output width.
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub rhos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnRow {
    pub width: usize,
    /// Max over the grid of |LN-post estimate − Σ^(L) of the normalized σ|.
    pub post_vs_limit: f64,
    /// Max over the grid of |LN-post estimate − normalized-σ network estimate|.
    pub post_vs_normalized: f64,
    /// Max over the grid of |LN-pre estimate − plain network estimate|.
    pub pre_vs_plain: f64,
    /// Max over the grid of |plain estimate − Σ^(L) of σ|.
    pub plain_vs_limit: f64,
    /// Max over the grid of the standard error of the plain estimate.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnReport {
    /// `ρ = 1` first, then the configured overlaps.
    pub rhos: Vec<f64>,
    pub limit_normalized: Vec<f64>,
    pub limit_plain: Vec<f64>,
    pub rows: Vec<LnRow>,
}

impl LnReport {
    pub fn post_deviation_shrinks(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].post_vs_limit < w[0].post_vs_limit)
    }

    /// LN-pre against plain at the widest width, in units of the noise floor.
    pub fn pre_noise_ratio(&self) -> Option<f64> {
        self.rows.last().map(|r| r.pre_vs_plain / r.noise_floor)
    }
}

/// Each seed draws one parameter set shared by all four variants, so the
/// comparisons use common random numbers. `Σ^(L)(x, y)` is estimated by
/// `⟨f(x), f(y)⟩ / n_L`.
pub fn ln_equivalence_check(cfg: &LnConfig) -> Result<LnReport> {
    if cfg.depth < 2 || cfg.widths.is_empty() || cfg.seeds == 0 {
        return Err(Error::Config("need depth ≥ 2, widths and seeds".into()));
    }
    let normalized = cfg.sigma.normalize()?;
    let mut rhos = vec![1.0];
    rhos.extend(&cfg.rhos);
    let lim = |s: &Nonlinearity| -> Result<Vec<f64>> {
        let arch = FcArchitecture::new(s.clone(), cfg.beta, cfg.depth, cfg.n0)?;
        rhos.iter().map(|r| arch.activation_kernel(*r, cfg.depth)).collect()
    };
    let limit_normalized = lim(&normalized)?;
    let limit_plain = lim(&cfg.sigma)?;
    let batch = overlap_batch(cfg.n0, &cfg.rhos)?;
    let mut rows = Vec::new();
    for w in &cfg.widths {
        let mut widths = vec![cfg.n0];
        widths.extend(std::iter::repeat_n(*w, cfg.depth));
        // [variant][seed][rho]: post, normalized, pre, plain
        let per_seed: Vec<[Vec<f64>; 4]> = (0..cfg.seeds as u64)
            .into_par_iter()
            .map(|s| {
                let base = FiniteNet::fc(
                    cfg.sigma.clone(),
                    cfg.beta,
                    widths.clone(),
                    cfg.base_seed.wrapping_add(s),
                )?;
                let variants = [
                    base.clone().with_norm_everywhere(NormLayer::LnPost),
                    base.clone().with_sigma(normalized.clone()),
                    base.clone().with_norm_everywhere(NormLayer::LnPre),
                    base,
                ];
                let mut out: [Vec<f64>; 4] = Default::default();
                for (slot, net) in out.iter_mut().zip(&variants) {
                    let f = net.forward(&batch)?;
                    let fx = f.pre(cfg.depth, 0, 0);
                    *slot = (0..batch.len())
                        .map(|j| dot(fx, f.pre(cfg.depth, j, 0)) / *w as f64)
                        .collect();
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let col = |v: usize, j: usize| -> Vec<f64> { per_seed.iter().map(|s| s[v][j]).collect() };
        let mut row = LnRow {
            width: *w,
            post_vs_limit: 0.0,
            post_vs_normalized: 0.0,
            pre_vs_plain: 0.0,
            plain_vs_limit: 0.0,
            noise_floor: 0.0,
        };
        for j in 0..rhos.len() {
            let (post, _) = mean_sd(&col(0, j));
            let (norm, _) = mean_sd(&col(1, j));
            let (pre, _) = mean_sd(&col(2, j));
            let (plain, sd) = mean_sd(&col(3, j));
            row.post_vs_limit = row.post_vs_limit.max((post - limit_normalized[j]).abs());
            row.post_vs_normalized = row.post_vs_normalized.max((post - norm).abs());
            row.pre_vs_plain = row.pre_vs_plain.max((pre - plain).abs());
            row.plain_vs_limit = row.plain_vs_limit.max((plain - limit_plain[j]).abs());
            row.noise_floor = row.noise_floor.max(sd / (cfg.seeds as f64).sqrt());
        }
        rows.push(row);
    }
    Ok(LnReport {
        rhos,
        limit_normalized,
        limit_plain,
        rows,
    })
}

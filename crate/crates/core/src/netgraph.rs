//! Graph-based networks: layered position sets, parent maps and weight sharing,
//! with the limiting kernel recursions evaluated pairwise.
//!
//! For positions `p, p'` of layer `ℓ+1`
//!
//! ```text
//! Σ^(ℓ+1,pp') = β² + (1-β²)·ν(p,p')·Σ_{q∈P(p), q'∈P(p'), χ} 𝕃^σ(Σ^(ℓ,qq'))
//! Θ^(ℓ+1,pp') = Σ^(ℓ+1,pp') + (1-β²)·ν(p,p')·Σ_{χ} Θ^(ℓ,qq')·𝕃^σ̇(Σ^(ℓ,qq'))
//! ```
//!
//! where `ν = 1/√(|P(p)||P(p')|)` under the parent-count parametrization and
//! `1/m` under a fixed fan-in `m`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlin::{check_beta, Nonlinearity, Shape};

pub const MAX_DIM: usize = 3;

/// Marginal variances within this of 1 count as on-sphere.
const UNIT_TOL: f64 = 1e-8;

/// Integer position, padded with zeros beyond the graph dimension.
pub type Coord = [i64; MAX_DIM];

pub fn coord(v: &[i64]) -> Result<Coord> {
    if v.len() > MAX_DIM {
        return Err(Error::Dimension(format!(
            "positions have at most {MAX_DIM} coordinates, got {}",
            v.len()
        )));
    }
    let mut c = [0; MAX_DIM];
    c[..v.len()].copy_from_slice(v);
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    /// Index of the parent within the previous layer.
    pub parent: usize,
    /// Sharing class within the layer.
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EdgeNormalization {
    /// `1/√(|P(p)| n_ℓ)`: the graph-based parametrization.
    ParentCount,
    /// `1/√(m n_ℓ)` for a fixed fan-in `m`: the standard parametrization.
    Fixed { fan_in: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionGraph {
    dim: usize,
    layers: Vec<Vec<Coord>>,
    /// `parents[ℓ][i]`: incoming edges of position `i` of layer `ℓ+1`.
    parents: Vec<Vec<Vec<Edge>>>,
    /// Number of sharing classes among the edges from layer `ℓ` to `ℓ+1`.
    classes: Vec<usize>,
    normalization: EdgeNormalization,
    lookup: Vec<HashMap<Coord, usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Layer of the child position.
    pub layer: usize,
    pub position: Option<usize>,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    dim: usize,
    layers: Vec<Vec<Vec<i64>>>,
    parents: Vec<Vec<Vec<Edge>>>,
    normalization: EdgeNormalization,
}

/// Incremental construction with sharing merged by union-find.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    dim: usize,
    layers: Vec<Vec<Coord>>,
    lookup: Vec<HashMap<Coord, usize>>,
    /// `(layer ℓ, child in ℓ+1, parent in ℓ)` per edge.
    edges: Vec<(usize, usize, usize)>,
    union: Vec<usize>,
    normalization: EdgeNormalization,
}

fn find(union: &mut [usize], mut i: usize) -> usize {
    while union[i] != i {
        union[i] = union[union[i]];
        i = union[i];
    }
    i
}

impl GraphBuilder {
    pub fn new(dim: usize, depth: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Config(format!("dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        if depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(Self {
            dim,
            layers: vec![Vec::new(); depth + 1],
            lookup: vec![HashMap::new(); depth + 1],
            edges: Vec::new(),
            union: Vec::new(),
            normalization: EdgeNormalization::ParentCount,
        })
    }

    pub fn normalization(mut self, n: EdgeNormalization) -> Self {
        self.normalization = n;
        self
    }

    /// Index of `c` in `layer`, inserting it if new.
    pub fn position(&mut self, layer: usize, c: Coord) -> usize {
        if let Some(i) = self.lookup[layer].get(&c) {
            return *i;
        }
        let i = self.layers[layer].len();
        self.layers[layer].push(c);
        self.lookup[layer].insert(c, i);
        i
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn find_position(&self, layer: usize, c: &Coord) -> Option<usize> {
        self.lookup.get(layer)?.get(c).copied()
    }

    /// Connect parent `parent` of layer `layer` to `child` of layer `layer+1`; returns the edge id.
    pub fn edge(&mut self, layer: usize, child: usize, parent: usize) -> usize {
        let id = self.edges.len();
        self.edges.push((layer, child, parent));
        self.union.push(id);
        id
    }

    /// Declare two edges of the same layer to share their weights.
    pub fn share(&mut self, a: usize, b: usize) -> Result<()> {
        if self.edges[a].0 != self.edges[b].0 {
            return Err(Error::Graph("cannot share edges across layers".into()));
        }
        let (ra, rb) = (find(&mut self.union, a), find(&mut self.union, b));
        if ra != rb {
            self.union[ra.max(rb)] = ra.min(rb);
        }
        Ok(())
    }

    pub fn build(mut self) -> Result<PositionGraph> {
        let depth = self.layers.len() - 1;
        let mut parents: Vec<Vec<Vec<Edge>>> = (0..depth)
            .map(|l| vec![Vec::new(); self.layers[l + 1].len()])
            .collect();
        let mut class_ids: Vec<HashMap<usize, usize>> = vec![HashMap::new(); depth];
        for id in 0..self.edges.len() {
            let (layer, child, parent) = self.edges[id];
            let root = find(&mut self.union, id);
            let next = class_ids[layer].len();
            let class = *class_ids[layer].entry(root).or_insert(next);
            parents[layer][child].push(Edge { parent, class });
        }
        let classes = class_ids.iter().map(|m| m.len()).collect();
        let graph = PositionGraph {
            dim: self.dim,
            layers: self.layers,
            parents,
            classes,
            normalization: self.normalization,
            lookup: self.lookup,
        };
        graph.ensure_valid()?;
        Ok(graph)
    }
}

impl PositionGraph {
    /// Build from raw parts; the sharing classes are taken as given.
    pub fn from_parts(
        dim: usize,
        layers: Vec<Vec<Coord>>,
        parents: Vec<Vec<Vec<Edge>>>,
        normalization: EdgeNormalization,
    ) -> Result<Self> {
        if layers.len() < 2 || parents.len() != layers.len() - 1 {
            return Err(Error::Graph(format!(
                "need L+1 position layers and L parent layers, got {} and {}",
                layers.len(),
                parents.len()
            )));
        }
        let classes = parents
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .flatten()
                    .map(|e| e.class + 1)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let lookup = layers
            .iter()
            .map(|l| l.iter().enumerate().map(|(i, c)| (*c, i)).collect())
            .collect();
        let g = Self {
            dim,
            layers,
            parents,
            classes,
            normalization,
            lookup,
        };
        g.ensure_valid()?;
        Ok(g)
    }

    /// A fully-connected network seen as a graph: one position per layer.
    pub fn chain(depth: usize) -> Result<Self> {
        let mut b = GraphBuilder::new(1, depth)?;
        let mut prev = b.position(0, [0; MAX_DIM]);
        for l in 0..depth {
            let p = b.position(l + 1, [0; MAX_DIM]);
            b.edge(l, p, prev);
            prev = p;
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, l: usize) -> &[Coord] {
        &self.layers[l]
    }

    pub fn layer_size(&self, l: usize) -> usize {
        self.layers[l].len()
    }

    /// Incoming edges of position `p` of layer `l ≥ 1`.
    pub fn parents(&self, l: usize, p: usize) -> &[Edge] {
        &self.parents[l - 1][p]
    }

    pub fn class_count(&self, l: usize) -> usize {
        self.classes[l]
    }

    pub fn normalization(&self) -> EdgeNormalization {
        self.normalization
    }

    pub fn index_of(&self, l: usize, c: &Coord) -> Option<usize> {
        self.lookup.get(l)?.get(c).copied()
    }

    /// Edge-normalization factor `ν(p, p')` for positions of layer `l ≥ 1`.
    pub fn pair_factor(&self, l: usize, p: usize, q: usize) -> f64 {
        match self.normalization {
            EdgeNormalization::ParentCount => {
                let n = self.parents(l, p).len() * self.parents(l, q).len();
                1.0 / (n as f64).sqrt()
            }
            EdgeNormalization::Fixed { fan_in } => 1.0 / fan_in,
        }
    }

    /// Parent pairs `(q, q')` of `(p, p')` whose edges share weights.
    pub fn shared_parent_pairs(&self, l: usize, p: usize, q: usize) -> Vec<(usize, usize)> {
        let ep = self.parents(l, p);
        let eq = self.parents(l, q);
        let mut out = Vec::new();
        for a in ep {
            for b in eq {
                if a.class == b.class {
                    out.push((a.parent, b.parent));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |layer, position, message: String| {
            v.push(Violation {
                layer,
                position,
                message,
            })
        };
        if self.dim == 0 || self.dim > MAX_DIM {
            push(0, None, format!("dimension {} outside 1..={MAX_DIM}", self.dim));
        }
        if self.layers.len() < 2 || self.parents.len() + 1 != self.layers.len() {
            push(0, None, "layer and parent counts disagree".into());
            return v;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                push(l, None, "empty position set".into());
            }
            let mut seen = BTreeSet::new();
            for (i, c) in layer.iter().enumerate() {
                if c[self.dim.min(MAX_DIM)..].iter().any(|x| *x != 0) {
                    push(l, Some(i), format!("coordinate {c:?} exceeds dimension {}", self.dim));
                }
                if !seen.insert(*c) {
                    push(l, Some(i), format!("duplicate position {c:?}"));
                }
            }
        }
        for (l, layer) in self.parents.iter().enumerate() {
            if layer.len() != self.layers[l + 1].len() {
                push(l + 1, None, "parent list length differs from position count".into());
                continue;
            }
            for (p, edges) in layer.iter().enumerate() {
                if edges.is_empty() {
                    push(l + 1, Some(p), "position has no parents".into());
                }
                let mut parents = BTreeSet::new();
                let mut classes = BTreeSet::new();
                for e in edges {
                    if e.parent >= self.layers[l].len() {
                        push(l + 1, Some(p), format!("parent index {} out of range", e.parent));
                    }
                    if e.class >= self.classes[l] {
                        push(l + 1, Some(p), format!("class id {} out of range", e.class));
                    }
                    if !parents.insert(e.parent) {
                        push(l + 1, Some(p), format!("parent {} listed twice", e.parent));
                    }
                    if !classes.insert(e.class) {
                        push(
                            l + 1,
                            Some(p),
                            format!("two incoming edges share class {}", e.class),
                        );
                    }
                }
            }
        }
        if let EdgeNormalization::Fixed { fan_in } = self.normalization {
            if !(fan_in.is_finite() && fan_in > 0.0) {
                push(0, None, format!("fixed fan-in {fan_in} must be positive"));
            }
        }
        v
    }

    fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = v
            .iter()
            .take(5)
            .map(|x| format!("layer {} position {:?}: {}", x.layer, x.position, x.message))
            .collect();
        Err(Error::Graph(format!(
            "{} violation(s): {}",
            v.len(),
            shown.join("; ")
        )))
    }

    /// `P^{∘k}(p)` for `p` in layer `l`, as indices into layer `l-k`.
    pub fn ancestors(&self, p: usize, l: usize, k: usize) -> Result<BTreeSet<usize>> {
        if k > l || l > self.depth() {
            return Err(Error::Domain(format!(
                "ancestor level {k} from layer {l} is out of range"
            )));
        }
        let mut set = BTreeSet::from([p]);
        for step in 0..k {
            let layer = l - step;
            set = set
                .iter()
                .flat_map(|q| self.parents(layer, *q).iter().map(|e| e.parent))
                .collect();
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDocument {
            dim: self.dim,
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|c| c[..self.dim].to_vec()).collect())
                .collect(),
            parents: self.parents.clone(),
            normalization: self.normalization,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.dim == 0 || doc.dim > MAX_DIM {
            return Err(Error::Graph(format!("dimension {} outside 1..={MAX_DIM}", doc.dim)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for layer in &doc.layers {
            let mut out = Vec::with_capacity(layer.len());
            for c in layer {
                if c.len() != doc.dim {
                    return Err(Error::Dimension(format!(
                        "position {c:?} does not have {} coordinates",
                        doc.dim
                    )));
                }
                out.push(coord(c)?);
            }
            layers.push(out);
        }
        Self::from_parts(doc.dim, layers, doc.parents, doc.normalization)
    }
}

/// Inputs on the layer-0 positions: `values[q]` is the vector at position `q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputField {
    pub n0: usize,
    pub values: Vec<Vec<f64>>,
}

impl InputField {
    pub fn new(n0: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        if let Some(v) = values.iter().find(|v| v.len() != n0) {
            return Err(Error::Dimension(format!(
                "input vector of length {} where n0 = {n0}",
                v.len()
            )));
        }
        Ok(Self { n0, values })
    }

    pub fn is_on_sphere(&self) -> bool {
        let target = (self.n0 as f64).sqrt();
        self.values
            .iter()
            .all(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - target).abs() <= UNIT_TOL)
    }

    fn dot(&self, q: usize, other: &InputField, q2: usize) -> f64 {
        self.values[q]
            .iter()
            .zip(&other.values[q2])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / self.n0 as f64
    }
}

/// Which parameters a layerwise contribution belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

type PairKey = (u32, u32, u32, u32, u32);

/// Memoized kernel recursions over a fixed list of inputs.
pub struct KernelEvaluator<'a> {
    graph: &'a PositionGraph,
    sigma: &'a Nonlinearity,
    beta: f64,
    inputs: Vec<InputField>,
    sigma_memo: HashMap<PairKey, f64>,
    ntk_memo: HashMap<PairKey, f64>,
    contrib_memo: HashMap<(ParamKind, u32, PairKey), f64>,
}

/// Canonical key: the pair `(a,p)`, `(b,q)` is unordered.
fn key(l: usize, a: usize, p: usize, b: usize, q: usize) -> PairKey {
    let (a, p, b, q) = if (a, p) <= (b, q) { (a, p, b, q) } else { (b, q, a, p) };
    (l as u32, a as u32, p as u32, b as u32, q as u32)
}

impl<'a> KernelEvaluator<'a> {
    pub fn new(
        graph: &'a PositionGraph,
        sigma: &'a Nonlinearity,
        beta: f64,
        inputs: Vec<InputField>,
    ) -> Result<Self> {
        check_beta(beta)?;
        let n_in = graph.layer_size(0);
        for (i, x) in inputs.iter().enumerate() {
            if x.values.len() != n_in {
                return Err(Error::Dimension(format!(
                    "input {i} covers {} positions, the graph has {n_in} at layer 0",
                    x.values.len()
                )));
            }
            if x.n0 != inputs[0].n0 {
                return Err(Error::Dimension("inputs disagree on n0".into()));
            }
        }
        Ok(Self {
            graph,
            sigma,
            beta,
            inputs,
            sigma_memo: HashMap::new(),
            ntk_memo: HashMap::new(),
            contrib_memo: HashMap::new(),
        })
    }

    pub fn graph(&self) -> &PositionGraph {
        self.graph
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    fn check_index(&self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<()> {
        if l == 0 || l > self.graph.depth() {
            return Err(Error::Domain(format!("layer {l} outside 1..={}", self.graph.depth())));
        }
        if a >= self.inputs.len() || b >= self.inputs.len() {
            return Err(Error::Domain(format!("input index ({a}, {b}) out of range")));
        }
        let n = self.graph.layer_size(l);
        if p >= n || q >= n {
            return Err(Error::Domain(format!(
                "position index ({p}, {q}) out of range for layer {l}"
            )));
        }
        Ok(())
    }

    /// `Σ^(l, pq)(x_a, x_b)`.
    pub fn sigma(&mut self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<f64> {
        self.check_index(l, a, p, b, q)?;
        self.sigma_rec(l, a, p, b, q)
    }

    /// `Θ^(l, pq)(x_a, x_b)`.
    pub fn ntk(&mut self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<f64> {
        self.check_index(l, a, p, b, q)?;
        self.ntk_rec(l, a, p, b, q)
    }

    /// Contribution of `W^(param_layer)` or `b^(param_layer)` to `Θ^(l, pq)`.
    pub fn contribution(
        &mut self,
        kind: ParamKind,
        param_layer: usize,
        l: usize,
        a: usize,
        p: usize,
        b: usize,
        q: usize,
    ) -> Result<f64> {
        self.check_index(l, a, p, b, q)?;
        if param_layer >= l {
            return Err(Error::Domain(format!(
                "parameters of layer {param_layer} do not feed layer {l}"
            )));
        }
        self.contrib_rec(kind, param_layer, l, a, p, b, q)
    }

    fn sigma_rec(&mut self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<f64> {
        let k = key(l, a, p, b, q);
        if let Some(v) = self.sigma_memo.get(&k) {
            return Ok(*v);
        }
        let b2 = self.beta * self.beta;
        let sum = self.weight_term(l, a, p, b, q)?;
        let v = b2 + (1.0 - b2) * sum;
        self.sigma_memo.insert(k, v);
        Ok(v)
    }

    /// `ν·Σ_χ 𝕃^σ` (or the input inner products at the first layer).
    fn weight_term(&mut self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<f64> {
        let g = self.graph;
        let nu = g.pair_factor(l, p, q);
        let mut sum = 0.0;
        for (qp, qq) in g.shared_parent_pairs(l, p, q) {
            sum += if l == 1 {
                self.inputs[a].dot(qp, &self.inputs[b], qq)
            } else {
                self.gauss(l - 1, a, qp, b, qq, false)?
            };
        }
        Ok(nu * sum)
    }

    fn ntk_rec(&mut self, l: usize, a: usize, p: usize, b: usize, q: usize) -> Result<f64> {
        let k = key(l, a, p, b, q);
        if let Some(v) = self.ntk_memo.get(&k) {
            return Ok(*v);
        }
        let s = self.sigma_rec(l, a, p, b, q)?;
        let v = if l == 1 {
            s
        } else {
            let b2 = self.beta * self.beta;
            let g = self.graph;
            let nu = g.pair_factor(l, p, q);
            let mut sum = 0.0;
            for (qp, qq) in g.shared_parent_pairs(l, p, q) {
                let t = self.ntk_rec(l - 1, a, qp, b, qq)?;
                if t != 0.0 {
                    sum += t * self.gauss(l - 1, a, qp, b, qq, true)?;
                }
            }
            s + (1.0 - b2) * nu * sum
        };
        self.ntk_memo.insert(k, v);
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn contrib_rec(
        &mut self,
        kind: ParamKind,
        param_layer: usize,
        l: usize,
        a: usize,
        p: usize,
        b: usize,
        q: usize,
    ) -> Result<f64> {
        let b2 = self.beta * self.beta;
        if param_layer + 1 == l {
            return match kind {
                ParamKind::Bias => Ok(b2),
                ParamKind::Weight => Ok((1.0 - b2) * self.weight_term(l, a, p, b, q)?),
            };
        }
        let mk = (kind, param_layer as u32, key(l, a, p, b, q));
        if let Some(v) = self.contrib_memo.get(&mk) {
            return Ok(*v);
        }
        let g = self.graph;
        let nu = g.pair_factor(l, p, q);
        let mut sum = 0.0;
        for (qp, qq) in g.shared_parent_pairs(l, p, q) {
            let t = self.contrib_rec(kind, param_layer, l - 1, a, qp, b, qq)?;
            if t != 0.0 {
                sum += t * self.gauss(l - 1, a, qp, b, qq, true)?;
            }
        }
        let v = (1.0 - b2) * nu * sum;
        self.contrib_memo.insert(mk, v);
        Ok(v)
    }

    /// `𝕃^g` for `g = σ` or `σ̇` under the covariance of layer `l` at `(a,p), (b,q)`.
    fn gauss(
        &mut self,
        l: usize,
        a: usize,
        p: usize,
        b: usize,
        q: usize,
        derivative: bool,
    ) -> Result<f64> {
        let v0 = self.sigma_rec(l, a, p, a, p)?;
        let v1 = self.sigma_rec(l, b, q, b, q)?;
        let c = self.sigma_rec(l, a, p, b, q)?;
        let dual = |s: &Nonlinearity, rho: f64| {
            let rho = if rho.abs() > 1.0 && rho.abs() <= 1.0 + UNIT_TOL {
                rho.signum()
            } else {
                rho
            };
            if derivative {
                s.dual_derivative(rho)
            } else {
                s.dual(rho)
            }
        };
        if (v0 - 1.0).abs() <= UNIT_TOL && (v1 - 1.0).abs() <= UNIT_TOL {
            // Dividing by the marginals keeps self-pairs at exactly ρ = 1, where
            // the ReLU derivative dual has a square-root singularity.
            return dual(self.sigma, c / (v0 * v1).sqrt());
        }
        if !self.sigma.is_positively_homogeneous() {
            return Err(Error::Precondition(format!(
                "marginal variances ({v0}, {v1}) are not 1 and σ is not positively homogeneous"
            )));
        }
        if v0 <= 0.0 || v1 <= 0.0 {
            return Ok(self.degenerate_gauss(v0, v1, derivative));
        }
        let s = (v0 * v1).sqrt();
        let r = dual(self.sigma, c / s)?;
        Ok(if derivative { r } else { s * r })
    }

    /// `𝕃` when a marginal vanishes, for ReLU or identity without shift.
    fn degenerate_gauss(&self, v0: f64, v1: f64, derivative: bool) -> f64 {
        if !derivative {
            // σ(0) = 0 for a positively homogeneous σ.
            return 0.0;
        }
        let a = self.sigma.scale();
        let (at_zero, mean) = match self.sigma.shape() {
            Shape::Identity => (a, a),
            _ => (0.0, a / 2.0),
        };
        if v0 <= 0.0 && v1 <= 0.0 {
            at_zero * at_zero
        } else {
            at_zero * mean
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub p: usize,
    pub q: usize,
    pub value: f64,
}

/// Kernel values at one layer for the materialized position pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelField {
    pub layer: usize,
    pub entries: Vec<FieldEntry>,
}

impl KernelField {
    pub fn get(&self, p: usize, q: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.p == p && e.q == q).map(|e| e.value)
    }
}

fn output_pairs(graph: &PositionGraph, pairs: Option<&[(usize, usize)]>) -> Vec<(usize, usize)> {
    match pairs {
        Some(p) => p.to_vec(),
        None => {
            let n = graph.layer_size(graph.depth());
            (0..n).flat_map(|p| (0..n).map(move |q| (p, q))).collect()
        }
    }
}

/// `Σ^(ℓ,pp')(x,y)` for `ℓ = 1..=L`. Output pairs default to all of `I_L × I_L`;
/// lower layers hold the ancestor pairs the recursion visited.
pub fn sigma_field(
    graph: &PositionGraph,
    sigma: &Nonlinearity,
    beta: f64,
    x: &InputField,
    y: &InputField,
    pairs: Option<&[(usize, usize)]>,
) -> Result<Vec<KernelField>> {
    let mut ev = KernelEvaluator::new(graph, sigma, beta, vec![x.clone(), y.clone()])?;
    let top = graph.depth();
    for (p, q) in output_pairs(graph, pairs) {
        ev.sigma(top, 0, p, 1, q)?;
    }
    let mut fields: Vec<KernelField> = (1..=top)
        .map(|layer| KernelField {
            layer,
            entries: Vec::new(),
        })
        .collect();
    for (&(l, a, p, b, q), v) in &ev.sigma_memo {
        // Only cross entries (x at p, y at q) belong to the field.
        let (p, q) = match (a, b) {
            (0, 1) => (p, q),
            (1, 0) => (q, p),
            _ => continue,
        };
        fields[l as usize - 1].entries.push(FieldEntry {
            p: p as usize,
            q: q as usize,
            value: *v,
        });
    }
    for f in &mut fields {
        f.entries.sort_by_key(|e| (e.p, e.q));
    }
    Ok(fields)
}

/// `Θ^(L,pp')(x,y)` on the requested output pairs (all pairs by default).
pub fn ntk_field(
    graph: &PositionGraph,
    sigma: &Nonlinearity,
    beta: f64,
    x: &InputField,
    y: &InputField,
    pairs: Option<&[(usize, usize)]>,
) -> Result<KernelField> {
    let mut ev = KernelEvaluator::new(graph, sigma, beta, vec![x.clone(), y.clone()])?;
    let top = graph.depth();
    let entries = output_pairs(graph, pairs)
        .into_iter()
        .map(|(p, q)| {
            Ok(FieldEntry {
                p,
                q,
                value: ev.ntk(top, 0, p, 1, q)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(KernelField { layer: top, entries })
}

/// Contribution of `W^(ℓ)` or `b^(ℓ)` to `Θ^(L,pp')(x,y)`.
pub fn layerwise_ntk(
    graph: &PositionGraph,
    sigma: &Nonlinearity,
    beta: f64,
    x: &InputField,
    y: &InputField,
    param_layer: usize,
    kind: ParamKind,
    pairs: Option<&[(usize, usize)]>,
) -> Result<KernelField> {
    let top = graph.depth();
    if param_layer >= top {
        return Err(Error::Domain(format!(
            "parameter layer {param_layer} must be below the depth {top}"
        )));
    }
    let mut ev = KernelEvaluator::new(graph, sigma, beta, vec![x.clone(), y.clone()])?;
    let entries = output_pairs(graph, pairs)
        .into_iter()
        .map(|(p, q)| {
            Ok(FieldEntry {
                p,
                q,
                value: ev.contribution(kind, param_layer, top, 0, p, 1, q)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(KernelField { layer: top, entries })
}

//! Weighted digraphs, Laplacians and the graph quantities entering the gain
//! conditions.
//!
//! Edge convention: an edge `(i, j)` with weight `a_ij > 0` means unit `j`
//! can send information to unit `i`. The weight is stored at row `i`, column
//! `j` of the adjacency matrix, the out-degree of `i` is the row sum and
//! `L = D_out - A`. Vertices carry 1-based unit labels that survive
//! structural edits, so a graph with units `{4, 11}` removed still calls its
//! remaining vertices by their original numbers. Matrix rows follow the
//! ascending label order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct WeightedDigraph {
    vertices: Vec<usize>,
    edges: BTreeMap<(usize, usize), f64>,
}

/// JSON exchange form: `{n, edges: [[i, j, w], ...]}` with 1-based indices.
/// `vertices` is optional and defaults to `1..=n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<usize>>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl TryFrom<GraphSpec> for WeightedDigraph {
    type Error = Error;

    fn try_from(spec: GraphSpec) -> Result<Self> {
        match spec.vertices {
            Some(vs) => {
                if vs.len() != spec.n {
                    return Err(Error::DimensionMismatch {
                        expected: spec.n,
                        got: vs.len(),
                    });
                }
                WeightedDigraph::with_vertices(vs, spec.edges)
            }
            None => WeightedDigraph::new(spec.n, spec.edges),
        }
    }
}

impl From<WeightedDigraph> for GraphSpec {
    fn from(g: WeightedDigraph) -> Self {
        let contiguous = g.vertices.iter().copied().eq(1..=g.vertices.len());
        GraphSpec {
            n: g.vertices.len(),
            vertices: (!contiguous).then(|| g.vertices.clone()),
            edges: g.edges().collect(),
        }
    }
}

impl WeightedDigraph {
    /// Graph on vertices `1..=n`.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        Self::with_vertices(1..=n, edges)
    }

    /// Graph on an arbitrary set of 1-based labels.
    pub fn with_vertices(
        vertices: impl IntoIterator<Item = usize>,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for v in vertices {
            if v == 0 {
                return Err(Error::UnknownVertex(0));
            }
            if !set.insert(v) {
                return Err(Error::DuplicateVertex(v));
            }
        }
        if set.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut g = WeightedDigraph {
            vertices: set.into_iter().collect(),
            edges: BTreeMap::new(),
        };
        for (i, j, w) in edges {
            g.insert_edge(i, j, w)?;
        }
        Ok(g)
    }

    fn insert_edge(&mut self, i: usize, j: usize, w: f64) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidEdge {
            i,
            j,
            reason: reason.to_string(),
        };
        if i == j {
            return Err(invalid("self-loop"));
        }
        if !(w.is_finite() && w > 0.0) {
            return Err(invalid("weight must be positive and finite"));
        }
        if !self.contains(i) || !self.contains(j) {
            return Err(invalid("endpoint is not a vertex"));
        }
        if self.edges.insert((i, j), w).is_some() {
            return Err(invalid("duplicate edge"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    /// Vertex labels in ascending order; this is also the matrix order.
    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn contains(&self, v: usize) -> bool {
        self.vertices.binary_search(&v).is_ok()
    }

    /// Matrix row of a vertex label.
    pub fn position(&self, v: usize) -> Option<usize> {
        self.vertices.binary_search(&v).ok()
    }

    /// Edges `(i, j, a_ij)` in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edges.get(&(i, j)).copied()
    }

    pub fn out_degree(&self, v: usize) -> f64 {
        self.edges
            .range((v, 0)..=(v, usize::MAX))
            .map(|(_, &w)| w)
            .sum()
    }

    pub fn in_degree(&self, v: usize) -> f64 {
        self.edges
            .iter()
            .filter(|(&(_, j), _)| j == v)
            .map(|(_, &w)| w)
            .sum()
    }

    /// `N_in(v) = { w : (w, v) ∈ E }`: the vertices that listen to `v`.
    pub fn in_neighbors(&self, v: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter(|&&(_, j)| j == v)
            .map(|&(i, _)| i)
            .collect()
    }

    /// `N_out(v) = { w : (v, w) ∈ E }`: the vertices `v` listens to.
    pub fn out_neighbors(&self, v: usize) -> Vec<usize> {
        self.edges
            .range((v, 0)..=(v, usize::MAX))
            .map(|(&(_, j), _)| j)
            .collect()
    }

    /// Removes the given vertices and every edge adjacent to them.
    pub fn remove_vertices(&self, vs: &[usize]) -> Result<Self> {
        for &v in vs {
            if !self.contains(v) {
                return Err(Error::UnknownVertex(v));
            }
        }
        let gone: BTreeSet<usize> = vs.iter().copied().collect();
        let vertices: Vec<usize> = self
            .vertices
            .iter()
            .copied()
            .filter(|v| !gone.contains(v))
            .collect();
        if vertices.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let edges = self
            .edges
            .iter()
            .filter(|(&(i, j), _)| !gone.contains(&i) && !gone.contains(&j))
            .map(|(&k, &w)| (k, w))
            .collect();
        Ok(WeightedDigraph { vertices, edges })
    }

    /// Adds vertex `v` together with `edges`, each of which must touch `v`.
    pub fn add_vertex(&self, v: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if v == 0 {
            return Err(Error::UnknownVertex(0));
        }
        if self.contains(v) {
            return Err(Error::DuplicateVertex(v));
        }
        let mut g = self.clone();
        let at = g.vertices.partition_point(|&u| u < v);
        g.vertices.insert(at, v);
        for &(i, j, w) in edges {
            if i != v && j != v {
                return Err(Error::InvalidEdge {
                    i,
                    j,
                    reason: format!("edge does not touch the added vertex {v}"),
                });
            }
            g.insert_edge(i, j, w)?;
        }
        Ok(g)
    }

    /// Edges of `self` between `v` and vertices of `onto`, i.e. the edge set
    /// `v` would bring along when it re-joins `onto`.
    pub fn edges_incident_within(
        &self,
        v: usize,
        onto: &WeightedDigraph,
    ) -> Vec<(usize, usize, f64)> {
        self.edges()
            .filter(|&(i, j, _)| (i == v && onto.contains(j)) || (j == v && onto.contains(i)))
            .collect()
    }

    pub fn is_strongly_connected(&self) -> bool {
        let n = self.n();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for &(i, j) in self.edges.keys() {
            let (pi, pj) = (self.position(i).unwrap(), self.position(j).unwrap());
            fwd[pi].push(pj);
            bwd[pj].push(pi);
        }
        reaches_all(&fwd) && reaches_all(&bwd)
    }

    /// `max_i |d_in(i) - d_out(i)|`.
    pub fn balance_residual(&self) -> f64 {
        self.vertices
            .iter()
            .map(|&v| (self.out_degree(v) - self.in_degree(v)).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_out_degree(&self) -> f64 {
        self.vertices
            .iter()
            .map(|&v| self.out_degree(v))
            .fold(0.0, f64::max)
    }

    pub fn is_weight_balanced(&self) -> bool {
        self.balance_residual() <= balance_tolerance(self.max_out_degree())
    }

    /// Strong connectivity plus weight balance, the standing assumption of
    /// every convergence result.
    pub fn validate_balanced_connected(&self) -> Result<()> {
        if !self.is_strongly_connected() {
            return Err(Error::NotStronglyConnected);
        }
        if !self.is_weight_balanced() {
            return Err(Error::NotWeightBalanced {
                residual: self.balance_residual(),
            });
        }
        Ok(())
    }

    pub fn laplacian_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut l = DMatrix::zeros(n, n);
        for (&(i, j), &w) in &self.edges {
            let (pi, pj) = (self.position(i).unwrap(), self.position(j).unwrap());
            l[(pi, pj)] -= w;
            l[(pi, pi)] += w;
        }
        l
    }

    pub fn laplacian(&self) -> LaplacianBundle {
        build_laplacian(self)
    }
}

fn reaches_all(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn balance_tolerance(max_out_degree: f64) -> f64 {
    1e-9 * max_out_degree.max(1.0)
}

/// Laplacian of a digraph with its cached spectral quantities.
#[derive(Clone, Debug)]
pub struct LaplacianBundle {
    pub matrix: DMatrix<f64>,
    /// Smallest non-zero eigenvalue of `L + L^T` (second smallest overall);
    /// `0.0` for a single vertex.
    pub lambda2_sym: f64,
    pub lambda_max_ltl: f64,
    pub is_strongly_connected: bool,
    pub is_weight_balanced: bool,
    /// `(row, [(col, a_ij)])` adjacency rows for fast products.
    rows: Vec<Vec<(usize, f64)>>,
}

/// Builds `L = D_out - A` and its spectral data.
pub fn build_laplacian(g: &WeightedDigraph) -> LaplacianBundle {
    let n = g.n();
    let matrix = g.laplacian_matrix();
    let mut rows = vec![Vec::new(); n];
    for (i, j, w) in g.edges() {
        rows[g.position(i).unwrap()].push((g.position(j).unwrap(), w));
    }

    let sym = &matrix + matrix.transpose();
    let mut sym_eigs: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    sym_eigs.sort_by(f64::total_cmp);
    let lambda2_sym = if n >= 2 { sym_eigs[1] } else { 0.0 };

    let ltl = matrix.transpose() * &matrix;
    let lambda_max_ltl = SymmetricEigen::new(ltl)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max);

    LaplacianBundle {
        matrix,
        lambda2_sym,
        lambda_max_ltl,
        is_strongly_connected: g.is_strongly_connected(),
        is_weight_balanced: g.is_weight_balanced(),
        rows,
    }
}

impl LaplacianBundle {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// `out = L x`, evaluated as `(L x)_i = Σ_j a_ij (x_i - x_j)` so that an
    /// exactly consensual `x` maps to an exact zero.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n());
        for (i, (row, o)) in self.rows.iter().zip(out.iter_mut()).enumerate() {
            let xi = x[i];
            *o = row.iter().map(|&(j, w)| w * (xi - x[j])).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply(x, &mut out);
        out
    }

    /// `max_i |(1^T L)_i|`.
    pub fn column_sum_residual(&self) -> f64 {
        self.matrix
            .column_iter()
            .map(|c| c.sum().abs())
            .fold(0.0, f64::max)
    }

    /// `max_i |(L 1)_i|`.
    pub fn row_sum_residual(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| r.sum().abs())
            .fold(0.0, f64::max)
    }
}

/// The four communication digraphs of the IEEE-118 experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReferenceGraph {
    G,
    Ghat,
    Gi,
    Gf,
}

impl ReferenceGraph {
    pub const ALL: [ReferenceGraph; 4] = [Self::G, Self::Ghat, Self::Gi, Self::Gf];

    pub fn name(self) -> &'static str {
        match self {
            Self::G => "G",
            Self::Ghat => "Ghat",
            Self::Gi => "Gi",
            Self::Gf => "Gf",
        }
    }
}

impl fmt::Display for ReferenceGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReferenceGraph {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown graph name {s:?} (expected G, Ghat, Gi or Gf)"
                ))
            })
    }
}

const REF_N: usize = 54;
const REF_WEIGHT: f64 = 0.1;
const REF_OFFSETS: [usize; 4] = [5, 10, 15, 20];
pub const GI_REMOVED: [usize; 4] = [4, 11, 25, 45];
pub const GF_REMOVED: [usize; 3] = [4, 25, 27];

fn id54(x: usize) -> usize {
    if x > REF_N {
        x - REF_N
    } else {
        x
    }
}

fn reference_edges(undirected_cycle: bool) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 1..=REF_N {
        let next = id54(i + 1);
        edges.push((i, next, REF_WEIGHT));
        if undirected_cycle {
            edges.push((next, i, REF_WEIGHT));
        }
        for k in REF_OFFSETS {
            let j = id54(i + k);
            edges.push((i, j, REF_WEIGHT));
            edges.push((j, i, REF_WEIGHT));
        }
    }
    edges
}

pub fn reference_graph(which: ReferenceGraph) -> WeightedDigraph {
    let keep = |removed: &[usize]| -> Vec<usize> {
        (1..=REF_N).filter(|v| !removed.contains(v)).collect()
    };
    let (vertices, undirected) = match which {
        ReferenceGraph::G => (keep(&[]), false),
        ReferenceGraph::Ghat => (keep(&[]), true),
        ReferenceGraph::Gi => (keep(&GI_REMOVED), true),
        ReferenceGraph::Gf => (keep(&GF_REMOVED), true),
    };
    let edges = reference_edges(undirected)
        .into_iter()
        .filter(|&(i, j, _)| vertices.contains(&i) && vertices.contains(&j));
    WeightedDigraph::with_vertices(vertices.iter().copied(), edges)
        .expect("reference graphs are well-formed")
}

/// Network-wide bounds `n <= n_max`, `max d_out <= d_max_out`,
/// `min a_ij >= a_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphBounds {
    pub n_max: usize,
    pub d_max_out: f64,
    pub a_min: f64,
}

impl GraphBounds {
    /// Tightest bounds, read directly off the graph.
    pub fn scan(g: &WeightedDigraph) -> Self {
        GraphBounds {
            n_max: g.n(),
            d_max_out: g.max_out_degree(),
            a_min: g.edges().map(|(_, _, w)| w).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn holds_for(&self, g: &WeightedDigraph) -> bool {
        let scan = Self::scan(g);
        scan.n_max <= self.n_max && scan.d_max_out <= self.d_max_out && scan.a_min >= self.a_min
    }
}

/// Lower bound `4 a_min / n_max^2` on `λ2(L + L^T)`.
pub fn spectral_lower_bound(b: &GraphBounds) -> f64 {
    4.0 * b.a_min / (b.n_max as f64).powi(2)
}

/// Upper bound `4 n_max d_max_out^2` on `λ_max(L^T L)`.
pub fn spectral_upper_bound(b: &GraphBounds) -> f64 {
    4.0 * b.n_max as f64 * b.d_max_out * b.d_max_out
}

/// What a single unit knows about itself before running the bound consensus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalBoundInputs {
    pub n_guess: usize,
    pub d_out: f64,
    /// Smallest weight on an edge adjacent to the unit (either direction);
    /// `+inf` for an isolated vertex.
    pub min_adjacent_weight: f64,
}

/// Inputs each unit can compute from its own edges. `n_guess` is the local
/// estimate of the network size; here every unit is told `n`.
pub fn local_bound_inputs(g: &WeightedDigraph) -> Vec<LocalBoundInputs> {
    g.vertices()
        .iter()
        .map(|&v| LocalBoundInputs {
            n_guess: g.n(),
            d_out: g.out_degree(v),
            min_adjacent_weight: g
                .edges()
                .filter(|&(i, j, _)| i == v || j == v)
                .map(|(_, _, w)| w)
                .fold(f64::INFINITY, f64::min),
        })
        .collect()
}

/// Synchronous max-consensus on `(n_guess, d_out)` and min-consensus on the
/// adjacent edge weights. Each round a unit folds in the values of the units
/// it listens to; on a strongly connected digraph the iteration is exact
/// after at most `n - 1` rounds.
pub fn consensus_bounds(g: &WeightedDigraph, local: &[LocalBoundInputs]) -> Result<GraphBounds> {
    if local.len() != g.n() {
        return Err(Error::DimensionMismatch {
            expected: g.n(),
            got: local.len(),
        });
    }
    if !g.is_strongly_connected() {
        return Err(Error::NotStronglyConnected);
    }
    let listens: Vec<Vec<usize>> = g
        .vertices()
        .iter()
        .map(|&v| {
            g.out_neighbors(v)
                .into_iter()
                .map(|u| g.position(u).unwrap())
                .collect()
        })
        .collect();

    let mut state: Vec<LocalBoundInputs> = local.to_vec();
    for _ in 0..g.n().saturating_sub(1) {
        let prev = state.clone();
        for (i, s) in state.iter_mut().enumerate() {
            for &j in &listens[i] {
                s.n_guess = s.n_guess.max(prev[j].n_guess);
                s.d_out = s.d_out.max(prev[j].d_out);
                s.min_adjacent_weight = s.min_adjacent_weight.min(prev[j].min_adjacent_weight);
            }
        }
        if state == prev {
            break;
        }
    }
    debug_assert!(state.windows(2).all(|w| w[0] == w[1]));
    let s = state[0];
    Ok(GraphBounds {
        n_max: s.n_guess,
        d_max_out: s.d_out,
        a_min: s.min_adjacent_weight,
    })
}

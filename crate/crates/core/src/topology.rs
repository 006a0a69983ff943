//! Weighted directed graphs and the edge transition operator.
//!
//! A vertex adjacency `W` holds split proportions: `W[u][v]` is the fraction
//! of the quantity arriving at `u` that leaves along edge `u -> v`. Edges are
//! enumerated row-major over `W`. The signed incidence matrix puts `-p` at
//! an edge's tail and `+1` at its head, and the edge transition matrix is
//!
//! ```text
//! A_E = (I⁻)ᵀ (I^c)⁺
//! ```
//!
//! whose entry `(i, j)` (row = destination edge, column = source edge) is the
//! split weight of `e_i` when `e_i` starts where `e_j` ends.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Small dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(CoreError::Topology("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CoreError::Topology(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn column_sum(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self.get(r, c)).sum()
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.data[r * self.cols..(r + 1) * self.cols].iter().sum()
    }

    /// Aligned decimal table, one row per line.
    pub fn to_table(&self, precision: usize) -> String {
        let cells: Vec<String> = self
            .data
            .iter()
            .map(|v| {
                // print -0 as 0
                let v = if *v == 0.0 { 0.0 } else { *v };
                format!("{v:.precision$}")
            })
            .collect();
        let width = cells.iter().map(String::len).max().unwrap_or(1);
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|c| format!("{:>width$}", cells[r * self.cols + c]))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Row-stochastic (or all-zero-row) split-proportion matrix with an empty diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexAdjacency {
    weights: Matrix,
}

impl VertexAdjacency {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let weights = Matrix::from_rows(&rows)?;
        if weights.rows() == 0 || weights.rows() != weights.cols() {
            return Err(CoreError::Topology(format!(
                "adjacency must be square and non-empty, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        for u in 0..weights.rows() {
            for v in 0..weights.cols() {
                let w = weights.get(u, v);
                if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                    return Err(CoreError::Topology(format!(
                        "adjacency[{u}][{v}] = {w} is not a proportion in [0, 1]"
                    )));
                }
                if u == v && w != 0.0 {
                    return Err(CoreError::Topology(format!(
                        "self-loop at vertex {u} (diagonal must be 0)"
                    )));
                }
            }
            let s = weights.row_sum(u);
            if (s - 1.0).abs() > ROW_SUM_TOL && s.abs() > ROW_SUM_TOL {
                return Err(CoreError::Topology(format!(
                    "row {u} sums to {s}; split proportions must sum to 1 (or 0 at a sink)"
                )));
            }
        }
        Ok(Self { weights })
    }

    /// The 4-vertex graph with a 0.3 / 0.7 fork at vertex 2.
    pub fn four_node() -> Self {
        Self::new(vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.3, 0.7],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
        ])
        .expect("fixture is valid")
    }

    /// Path graph `1 -> 2 -> ... -> n`; the last vertex is a sink.
    pub fn path(n: usize) -> Self {
        let mut rows = vec![vec![0.0; n]; n];
        for (k, row) in rows.iter_mut().enumerate().take(n.saturating_sub(1)) {
            row[k + 1] = 1.0;
        }
        Self::new(rows).expect("path graph is valid")
    }

    /// The 10-vertex path graph.
    pub fn ten_node() -> Self {
        Self::path(10)
    }

    pub fn n_vertices(&self) -> usize {
        self.weights.rows()
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        self.weights.get(u, v)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.weights
    }

    pub fn is_sink(&self, u: usize) -> bool {
        self.weights.row_sum(u).abs() <= ROW_SUM_TOL
    }

    pub fn has_sinks(&self) -> bool {
        (0..self.n_vertices()).any(|u| self.is_sink(u))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub split_weight: f64,
    /// Number of spatial segments along the edge.
    pub length: usize,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based vertex labels
        write!(
            f,
            "{}->{} (p={}, len={})",
            self.tail + 1,
            self.head + 1,
            self.split_weight,
            self.length
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    edges: Vec<Edge>,
}

impl EdgeList {
    /// Validates vertex range, weights in (0, 1] and positive lengths.
    pub fn new(edges: Vec<Edge>, n_vertices: usize) -> Result<Self> {
        for (i, e) in edges.iter().enumerate() {
            if e.tail >= n_vertices || e.head >= n_vertices {
                return Err(CoreError::Topology(format!(
                    "edge {i} ({}->{}) references a vertex outside 0..{n_vertices}",
                    e.tail, e.head
                )));
            }
            if !(e.split_weight > 0.0 && e.split_weight <= 1.0) {
                return Err(CoreError::Topology(format!(
                    "edge {i} has split weight {} outside (0, 1]",
                    e.split_weight
                )));
            }
            if e.length == 0 {
                return Err(CoreError::Topology(format!("edge {i} has zero length")));
            }
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn with_lengths(mut self, lengths: &[usize]) -> Result<Self> {
        if lengths.len() != self.edges.len() {
            return Err(CoreError::Topology(format!(
                "{} edge lengths given for {} edges",
                lengths.len(),
                self.edges.len()
            )));
        }
        if lengths.contains(&0) {
            return Err(CoreError::Topology("edge length must be positive".into()));
        }
        for (e, &l) in self.edges.iter_mut().zip(lengths) {
            e.length = l;
        }
        Ok(self)
    }
}

/// One edge per strictly positive adjacency entry, in row-major order.
pub fn edges_from_adjacency(adj: &VertexAdjacency, default_length: usize) -> Result<EdgeList> {
    if default_length == 0 {
        return Err(CoreError::Topology("edge length must be positive".into()));
    }
    let n = adj.n_vertices();
    let mut edges = Vec::new();
    for tail in 0..n {
        for head in 0..n {
            let p = adj.weight(tail, head);
            if p > 0.0 {
                edges.push(Edge {
                    tail,
                    head,
                    split_weight: p,
                    length: default_length,
                });
            }
        }
    }
    EdgeList::new(edges, n)
}

/// Signed |V|x|E| incidence matrix: `-p` at the tail, `+1` at the head.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrix(Matrix);

impl IncidenceMatrix {
    /// Wraps an arbitrary matrix, e.g. one read from elsewhere.
    pub fn from_matrix(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn incidence_from_edges(edges: &EdgeList, n_vertices: usize) -> Result<IncidenceMatrix> {
    let mut m = Matrix::zeros(n_vertices, edges.len());
    for (j, e) in edges.edges().iter().enumerate() {
        if e.tail >= n_vertices || e.head >= n_vertices {
            return Err(CoreError::Topology(format!(
                "edge {j} references vertex outside 0..{n_vertices}"
            )));
        }
        if e.tail == e.head {
            return Err(CoreError::Topology(format!("edge {j} is a self-loop")));
        }
        m.set(e.tail, j, -e.split_weight);
        m.set(e.head, j, 1.0);
    }
    Ok(IncidenceMatrix(m))
}

/// The positive part, negated negative part and conservative form of an
/// incidence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceParts {
    pub positive: Matrix,
    pub negative: Matrix,
    pub conservative: Matrix,
}

pub fn split_incidence(inc: &IncidenceMatrix) -> IncidenceParts {
    let m = inc.matrix();
    IncidenceParts {
        positive: m.map(|x| if x > 0.0 { x } else { 0.0 }),
        negative: m.map(|x| if x < 0.0 { -x } else { 0.0 }),
        conservative: m.map(|x| if x > 0.0 { 1.0 } else { x }),
    }
}

/// |E|x|E| routing operator; rows are destination edges, columns source edges.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTransitionMatrix(Matrix);

impl EdgeTransitionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_edges(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, dest: usize, src: usize) -> f64 {
        self.0.get(dest, src)
    }
}

pub fn edge_transition_matrix(inc: &IncidenceMatrix) -> Result<EdgeTransitionMatrix> {
    let parts = split_incidence(inc);
    let conservative_pos = parts.conservative.map(|x| if x > 0.0 { x } else { 0.0 });
    let a = parts.negative.transpose().matmul(&conservative_pos)?;
    for j in 0..a.cols() {
        let s = a.column_sum(j);
        if (s - 1.0).abs() > ROW_SUM_TOL && s.abs() > ROW_SUM_TOL {
            return Err(CoreError::Topology(format!(
                "edge transition column {j} sums to {s}; outgoing split weights are inconsistent"
            )));
        }
        for i in 0..a.rows() {
            let v = a.get(i, j);
            if !(0.0..=1.0 + ROW_SUM_TOL).contains(&v) {
                return Err(CoreError::Topology(format!(
                    "edge transition entry ({i}, {j}) = {v} is outside [0, 1]"
                )));
            }
        }
    }
    Ok(EdgeTransitionMatrix(a))
}

/// Graph file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n_vertices: usize,
    pub adjacency: Vec<Vec<f64>>,
    /// Uniform segment count per edge; falls back to the simulation default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_length: Option<usize>,
    /// Per-edge segment counts in row-major edge order; overrides `edge_length`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_lengths: Option<Vec<usize>>,
}

impl GraphSpec {
    pub fn from_adjacency(adj: &VertexAdjacency) -> Self {
        Self {
            n_vertices: adj.n_vertices(),
            adjacency: adj.matrix().to_rows(),
            edge_length: None,
            edge_lengths: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GraphSpec = serde_json::from_str(text)?;
        spec.adjacency()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn adjacency(&self) -> Result<VertexAdjacency> {
        if self.adjacency.len() != self.n_vertices {
            return Err(CoreError::Topology(format!(
                "n_vertices is {} but adjacency has {} rows",
                self.n_vertices,
                self.adjacency.len()
            )));
        }
        VertexAdjacency::new(self.adjacency.clone())
    }

    /// Builds the routing network, using `default_length` when the file
    /// does not fix edge lengths.
    pub fn network(&self, default_length: usize) -> Result<Network> {
        let adj = self.adjacency()?;
        let mut edges = edges_from_adjacency(&adj, self.edge_length.unwrap_or(default_length))?;
        if let Some(lengths) = &self.edge_lengths {
            edges = edges.with_lengths(lengths)?;
        }
        Network::new(adj, edges)
    }
}

/// Everything the simulator needs: topology, edges and routing operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    adjacency: VertexAdjacency,
    edges: EdgeList,
    incidence: IncidenceMatrix,
    transition: EdgeTransitionMatrix,
}

impl Network {
    pub fn new(adjacency: VertexAdjacency, edges: EdgeList) -> Result<Self> {
        let incidence = incidence_from_edges(&edges, adjacency.n_vertices())?;
        let transition = edge_transition_matrix(&incidence)?;
        Ok(Self {
            adjacency,
            edges,
            incidence,
            transition,
        })
    }

    pub fn from_adjacency(adjacency: VertexAdjacency, edge_length: usize) -> Result<Self> {
        let edges = edges_from_adjacency(&adjacency, edge_length)?;
        Self::new(adjacency, edges)
    }

    pub fn adjacency(&self) -> &VertexAdjacency {
        &self.adjacency
    }

    pub fn edges(&self) -> &EdgeList {
        &self.edges
    }

    pub fn incidence(&self) -> &IncidenceMatrix {
        &self.incidence
    }

    pub fn transition(&self) -> &EdgeTransitionMatrix {
        &self.transition
    }

    pub fn n_vertices(&self) -> usize {
        self.adjacency.n_vertices()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

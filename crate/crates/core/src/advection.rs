//! Discrete advection of a non-negative scalar along graph edges.
//!
//! Each edge is split into equal segments ordered tail to head. With a
//! constant velocity of `sigma` segments per step the interior update is an
//! exact shift, `y_e(x, t + 1) = y_e(x - sigma, t)`. The `sigma` segments that
//! run off the head of a source edge are routed through the edge transition
//! matrix onto the first `sigma` segments of every successor edge, keeping
//! their spatial order. What crosses a vertex during a step is that step's
//! measurement at the vertex.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::topology::{EdgeList, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Segments per edge for edges without an explicit length.
    pub segments_per_edge: usize,
    /// Velocity times step length, in segments.
    pub shift_per_step: usize,
    /// Series length is `n_steps + 1` measurements.
    pub n_steps: usize,
    /// Segments per edge that receive a random initial value.
    pub init_count: usize,
    pub init_low: u32,
    pub init_high: u32,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            segments_per_edge: 100,
            shift_per_step: 4,
            n_steps: 48,
            init_count: 50,
            init_low: 0,
            init_high: 10,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self, edges: &EdgeList) -> Result<()> {
        let min_len = edges
            .edges()
            .iter()
            .map(|e| e.length)
            .min()
            .unwrap_or(self.segments_per_edge);
        if self.shift_per_step == 0 || self.shift_per_step > min_len {
            return Err(CoreError::Config(format!(
                "shift_per_step must lie in 1..={min_len} (shortest edge), got {}",
                self.shift_per_step
            )));
        }
        if self.init_count > min_len {
            return Err(CoreError::Config(format!(
                "init_count {} exceeds the shortest edge ({min_len} segments)",
                self.init_count
            )));
        }
        if self.init_low > self.init_high {
            return Err(CoreError::Config(format!(
                "init_low {} exceeds init_high {}",
                self.init_low, self.init_high
            )));
        }
        Ok(())
    }
}

/// Per-edge segment values, tail first.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeState {
    segments: Vec<Vec<f64>>,
}

impl EdgeState {
    pub fn new(segments: Vec<Vec<f64>>) -> Result<Self> {
        for (e, seg) in segments.iter().enumerate() {
            if let Some(s) = seg.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(CoreError::State(format!(
                    "edge {e} segment {s} holds {} (values must be finite and non-negative)",
                    seg[s]
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn zeros(edges: &EdgeList) -> Self {
        Self {
            segments: edges.edges().iter().map(|e| vec![0.0; e.length]).collect(),
        }
    }

    pub fn edge(&self, e: usize) -> &[f64] {
        &self.segments[e]
    }

    pub fn segments(&self) -> &[Vec<f64>] {
        &self.segments
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().flatten().sum()
    }

    /// `a * self + b * other`, used for superposition checks.
    pub fn combine(&self, a: f64, other: &EdgeState, b: f64) -> Result<EdgeState> {
        let segs = self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect())
            .collect();
        EdgeState::new(segs)
    }
}

/// Generator for series `index` of a batch seeded with `seed`.
pub fn series_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `init_count` distinct segments per edge and fills them from the
/// discrete uniform distribution on `init_low..=init_high`.
pub fn init_edge_state<R: Rng + ?Sized>(edges: &EdgeList, config: &SimulationConfig, rng: &mut R) -> Result<EdgeState> {
    let mut segments = Vec::with_capacity(edges.len());
    for (i, e) in edges.edges().iter().enumerate() {
        if config.init_count > e.length {
            return Err(CoreError::Config(format!(
                "init_count {} exceeds length {} of edge {i}",
                config.init_count, e.length
            )));
        }
        let mut seg = vec![0.0; e.length];
        for idx in sample(rng, e.length, config.init_count).into_vec() {
            seg[idx] = f64::from(rng.gen_range(config.init_low..=config.init_high));
        }
        segments.push(seg);
    }
    EdgeState::new(segments)
}

/// Advances the state by one step and returns the per-vertex pass-through.
pub fn advect_step(state: &EdgeState, network: &Network, sigma: usize) -> Result<(EdgeState, Vec<f64>)> {
    let edges = network.edges().edges();
    if state.segments.len() != edges.len() {
        return Err(CoreError::State(format!(
            "state has {} edges, network has {}",
            state.segments.len(),
            edges.len()
        )));
    }
    for (i, (seg, e)) in state.segments.iter().zip(edges).enumerate() {
        if seg.len() != e.length {
            return Err(CoreError::State(format!(
                "edge {i} has {} segments, expected {}",
                seg.len(),
                e.length
            )));
        }
        if sigma == 0 || sigma > e.length {
            return Err(CoreError::Config(format!(
                "shift {sigma} must lie in 1..={} for edge {i}",
                e.length
            )));
        }
        if let Some(s) = seg.iter().position(|v| !(*v >= 0.0)) {
            return Err(CoreError::State(format!(
                "edge {i} segment {s} is negative ({})",
                seg[s]
            )));
        }
    }

    let mut measurement = vec![0.0; network.n_vertices()];
    let mut next: Vec<Vec<f64>> = Vec::with_capacity(edges.len());
    for (seg, e) in state.segments.iter().zip(edges) {
        let mut new = vec![0.0; e.length];
        new[sigma..].copy_from_slice(&seg[..e.length - sigma]);
        measurement[e.head] += seg[e.length - sigma..].iter().sum::<f64>();
        next.push(new);
    }
    let a = network.transition();
    for (dest, new) in next.iter_mut().enumerate() {
        for (src, (seg, e)) in state.segments.iter().zip(edges).enumerate() {
            let w = a.get(dest, src);
            if w == 0.0 {
                continue;
            }
            let outflow = &seg[e.length - sigma..];
            for (r, v) in outflow.iter().enumerate() {
                new[r] += w * v;
            }
        }
    }
    Ok((EdgeState { segments: next }, measurement))
}

/// Aggregated vertex measurements, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSeries {
    n_vertices: usize,
    data: Vec<f64>,
}

impl VertexSeries {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_vertices = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_vertices) {
            return Err(CoreError::State("ragged vertex series".into()));
        }
        Ok(Self {
            n_vertices,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn len(&self) -> usize {
        if self.n_vertices == 0 {
            0
        } else {
            self.data.len() / self.n_vertices
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, t: usize, v: usize) -> f64 {
        self.data[t * self.n_vertices + v]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_vertices..(t + 1) * self.n_vertices]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Runs `n_steps + 1` steps from a fresh random initial state and stacks the
/// measurements. Series `index` draws from its own generator stream.
pub fn simulate_series(network: &Network, config: &SimulationConfig, index: u64) -> Result<VertexSeries> {
    config.validate(network.edges())?;
    let mut rng = series_rng(config.seed, index);
    let state = init_edge_state(network.edges(), config, &mut rng)?;
    run_from(network, config, state).map(|(series, _)| series)
}

/// Evolves a given initial state; returns the series and the final state.
pub fn run_from(
    network: &Network,
    config: &SimulationConfig,
    mut state: EdgeState,
) -> Result<(VertexSeries, EdgeState)> {
    let mut rows = Vec::with_capacity(config.n_steps + 1);
    for _ in 0..=config.n_steps {
        let (next, m) = advect_step(&state, network, config.shift_per_step)?;
        rows.push(m);
        state = next;
    }
    Ok((VertexSeries::from_rows(rows)?, state))
}

pub fn simulate_batch(network: &Network, config: &SimulationConfig, n_series: usize) -> Result<Vec<VertexSeries>> {
    (0..n_series as u64)
        .map(|i| simulate_series(network, config, i))
        .collect()
}

//! Continuous control paths through unit-spaced observation knots.
//!
//! Each vertex gets two channels: time itself and the observation. The time
//! channel is linear, so both schemes reproduce it exactly with derivative 1.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    NaturalCubic,
    Linear,
}

/// Number of control channels per vertex: `[time, observation]`.
pub const CONTROL_CHANNELS: usize = 2;

/// Cubic `a + b s + c s^2 + d s^3` on `[i, i + 1]`, with `s = t - i`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Piece {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    scheme: Interpolation,
    n_knots: usize,
    n_vertices: usize,
    /// `pieces[v][i]` covers interval `i` of vertex `v`.
    pieces: Vec<Vec<Piece>>,
}

impl ControlPath {
    /// `window` is `n_knots x n_vertices` row-major; knot `i` sits at time `i`.
    pub fn new(window: &[f64], n_vertices: usize, scheme: Interpolation) -> Result<Self> {
        if n_vertices == 0 || window.len() % n_vertices != 0 {
            return Err(CoreError::Config(format!(
                "window of {} values is not a multiple of {n_vertices} vertices",
                window.len()
            )));
        }
        let n_knots = window.len() / n_vertices;
        if n_knots < 2 {
            return Err(CoreError::Config("a control path needs at least two knots".into()));
        }
        if let Some(i) = window.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!(
                "non-finite observation {} at knot {}, vertex {}",
                window[i],
                i / n_vertices,
                i % n_vertices
            )));
        }
        let pieces = (0..n_vertices)
            .map(|v| {
                let ys: Vec<f64> = (0..n_knots).map(|t| window[t * n_vertices + v]).collect();
                match scheme {
                    Interpolation::NaturalCubic => natural_cubic(&ys),
                    Interpolation::Linear => linear(&ys),
                }
            })
            .collect();
        Ok(Self {
            scheme,
            n_knots,
            n_vertices,
            pieces,
        })
    }

    pub fn scheme(&self) -> Interpolation {
        self.scheme
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn n_intervals(&self) -> usize {
        self.n_knots - 1
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn t_end(&self) -> f64 {
        (self.n_knots - 1) as f64
    }

    fn locate(&self, t: f64) -> usize {
        (t.floor().max(0.0) as usize).min(self.n_intervals() - 1)
    }

    /// Observation channel of vertex `v` at time `t`.
    pub fn observation(&self, v: usize, t: f64) -> f64 {
        self.observation_in(self.locate(t), v, t)
    }

    fn observation_in(&self, interval: usize, v: usize, t: f64) -> f64 {
        let p = self.pieces[v][interval];
        let s = t - interval as f64;
        p.a + s * (p.b + s * (p.c + s * p.d))
    }

    /// `[time, observation]` of every vertex at `t`, flattened per vertex.
    pub fn value(&self, t: f64) -> Vec<f64> {
        (0..self.n_vertices).flat_map(|v| [t, self.observation(v, t)]).collect()
    }

    /// `dX/dt` of every vertex at `t`, evaluated with the polynomial of
    /// `interval`. Passing the interval explicitly gives one-sided
    /// derivatives at knots, which a knot-aligned solver needs for the
    /// piecewise-linear scheme.
    pub fn derivative_in(&self, interval: usize, t: f64) -> Vec<f64> {
        (0..self.n_vertices)
            .flat_map(|v| {
                let p = self.pieces[v][interval];
                let s = t - interval as f64;
                [1.0, p.b + s * (2.0 * p.c + 3.0 * s * p.d)]
            })
            .collect()
    }

    pub fn derivative(&self, t: f64) -> Vec<f64> {
        self.derivative_in(self.locate(t), t)
    }

    /// Second derivative of the observation channel.
    pub fn second_derivative(&self, v: usize, t: f64) -> f64 {
        let i = self.locate(t);
        let p = self.pieces[v][i];
        let s = t - i as f64;
        2.0 * p.c + 6.0 * p.d * s
    }
}

fn linear(ys: &[f64]) -> Vec<Piece> {
    ys.windows(2)
        .map(|w| Piece {
            a: w[0],
            b: w[1] - w[0],
            c: 0.0,
            d: 0.0,
        })
        .collect()
}

/// Natural cubic spline with unit knot spacing: the knot second derivatives
/// `m` solve `m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])` with
/// `m[0] = m[n-1] = 0` (Thomas algorithm).
fn natural_cubic(ys: &[f64]) -> Vec<Piece> {
    let n = ys.len();
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let rhs: Vec<f64> = (1..n - 1)
            .map(|i| 6.0 * (ys[i + 1] - 2.0 * ys[i] + ys[i - 1]))
            .collect();
        let mut c_prime = vec![0.0; k];
        let mut d_prime = vec![0.0; k];
        c_prime[0] = 1.0 / 4.0;
        d_prime[0] = rhs[0] / 4.0;
        for i in 1..k {
            let denom = 4.0 - c_prime[i - 1];
            c_prime[i] = 1.0 / denom;
            d_prime[i] = (rhs[i] - d_prime[i - 1]) / denom;
        }
        m[k] = d_prime[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = d_prime[i] - c_prime[i] * m[i + 2];
        }
    }
    (0..n - 1)
        .map(|i| Piece {
            a: ys[i],
            b: (ys[i + 1] - ys[i]) - (2.0 * m[i] + m[i + 1]) / 6.0,
            c: m[i] / 2.0,
            d: (m[i + 1] - m[i]) / 6.0,
        })
        .collect()
}

//! Coupled graph neural controlled differential equations.
//!
//! Per vertex, a hidden state `H` is driven by the data control path `X` and
//! a second hidden state `Z` is driven by `H`:
//!
//! ```text
//! dH/dt = f(H) . dX/dt                      (dH)_{mh} = f_{mhx} (dX)_{mx}
//! dZ/dt = g(Z) . A_outer dH/dt              (dZ)_{kz} = g_{kzh} (A_outer dH)_{kh}
//! ```
//!
//! `f` and `g` are per-vertex MLPs with weights shared across vertices, so
//! with `A_outer = I` no information moves between vertices except through
//! the mixing slot inside `g`. That slot sits after the last hidden layer
//! of `g` and is either nothing, a fixed vertex matrix `A_inner`, or an
//! adaptive graph convolution with a learned node embedding.
//!
//! Both states advance together under fixed-step RK4 on a grid aligned with
//! the control knots, and gradients come from backpropagating through the
//! unrolled solver.

use std::collections::HashMap;

use gncde_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{ControlPath, Interpolation, CONTROL_CHANNELS};
use crate::dataset::{ForecastSample, INPUT_LEN, TARGET_LEN};
use crate::error::{CoreError, Result};
use crate::topology::VertexAdjacency;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMechanism {
    Identity,
    Informed,
    Agc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMechanism {
    Identity,
    Informed,
}

impl std::fmt::Display for InnerMechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InnerMechanism::Identity => "identity",
            InnerMechanism::Informed => "informed",
            InnerMechanism::Agc => "agc",
        })
    }
}

impl std::fmt::Display for OuterMechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OuterMechanism::Identity => "identity",
            OuterMechanism::Informed => "informed",
        })
    }
}

impl std::str::FromStr for InnerMechanism {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "informed" => Ok(Self::Informed),
            "agc" => Ok(Self::Agc),
            other => Err(CoreError::Config(format!("unknown inner mechanism `{other}`"))),
        }
    }
}

impl std::str::FromStr for OuterMechanism {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "informed" => Ok(Self::Informed),
            other => Err(CoreError::Config(format!("unknown outer mechanism `{other}`"))),
        }
    }
}

/// Which way an informed matrix reads the adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `A = Wᵀ`: row `m` gathers from vertices with an edge into `m`.
    Upstream,
    /// `A = W`: row `m` gathers from vertices `m` has an edge into.
    Downstream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Split proportions as given.
    Proportional,
    /// 1 wherever an edge exists.
    Binary,
    /// 1 wherever an edge exists in either direction.
    Undirected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InformedMatrixSpec {
    pub orientation: Orientation,
    pub weighting: Weighting,
    pub self_loop: bool,
}

impl Default for InformedMatrixSpec {
    fn default() -> Self {
        Self {
            orientation: Orientation::Upstream,
            weighting: Weighting::Proportional,
            self_loop: true,
        }
    }
}

/// Vertex mixing matrix derived from the graph adjacency.
pub fn informed_matrix(adj: &VertexAdjacency, spec: InformedMatrixSpec) -> Vec<Vec<f64>> {
    let n = adj.n_vertices();
    let w = |u: usize, v: usize| -> f64 {
        match spec.weighting {
            Weighting::Proportional => adj.weight(u, v),
            Weighting::Binary => f64::from(u8::from(adj.weight(u, v) > 0.0)),
            Weighting::Undirected => f64::from(u8::from(adj.weight(u, v) > 0.0 || adj.weight(v, u) > 0.0)),
        }
    };
    (0..n)
        .map(|m| {
            (0..n)
                .map(|k| {
                    let base = match spec.orientation {
                        Orientation::Upstream => w(k, m),
                        Orientation::Downstream => w(m, k),
                    };
                    if spec.self_loop && m == k {
                        base + 1.0
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_vertices: usize,
    pub d_h: usize,
    pub d_z: usize,
    /// Width of the hidden layers of both vector fields.
    pub hidden_width: usize,
    /// Linear layers per vector field: 2 or 3.
    pub n_layers: usize,
    pub inner: InnerMechanism,
    pub outer: OuterMechanism,
    pub agc_embed_dim: usize,
    #[serde(default)]
    pub a_inner: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub a_outer: Option<Vec<Vec<f64>>>,
    /// RK4 steps per knot interval.
    pub substeps: usize,
    pub interpolation: Interpolation,
    pub input_len: usize,
    pub horizon: usize,
    /// Observations are multiplied by this before entering the control path
    /// and predictions divided by it.
    pub obs_scale: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a graph; informed matrices are filled from
    /// `adj` when a mechanism asks for them.
    pub fn for_graph(adj: &VertexAdjacency, inner: InnerMechanism, outer: OuterMechanism) -> Self {
        let mut cfg = Self {
            n_vertices: adj.n_vertices(),
            d_h: 16,
            d_z: 16,
            hidden_width: 8,
            n_layers: 3,
            inner,
            outer,
            agc_embed_dim: 10,
            a_inner: None,
            a_outer: None,
            substeps: 2,
            interpolation: Interpolation::NaturalCubic,
            input_len: INPUT_LEN,
            horizon: TARGET_LEN,
            obs_scale: 0.1,
        };
        cfg.set_mechanisms(adj, inner, outer, InformedMatrixSpec::default());
        cfg
    }

    /// Switches mechanisms, supplying or dropping informed matrices to match.
    pub fn set_mechanisms(
        &mut self,
        adj: &VertexAdjacency,
        inner: InnerMechanism,
        outer: OuterMechanism,
        spec: InformedMatrixSpec,
    ) {
        self.inner = inner;
        self.outer = outer;
        self.a_inner = (inner == InnerMechanism::Informed).then(|| informed_matrix(adj, spec));
        self.a_outer = (outer == OuterMechanism::Informed).then(|| informed_matrix(adj, spec));
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.n_vertices == 0 || self.d_h == 0 || self.d_z == 0 || self.hidden_width == 0 {
            return bad("n_vertices, d_h, d_z and hidden_width must be positive".into());
        }
        if !(2..=3).contains(&self.n_layers) {
            return bad(format!("n_layers must be 2 or 3, got {}", self.n_layers));
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if self.input_len < 2 || self.horizon == 0 {
            return bad("input_len must be >= 2 and horizon >= 1".into());
        }
        if !(self.obs_scale.is_finite() && self.obs_scale > 0.0) {
            return bad(format!("obs_scale must be positive, got {}", self.obs_scale));
        }
        if self.inner == InnerMechanism::Agc && self.agc_embed_dim == 0 {
            return bad("agc_embed_dim must be positive for the AGC mechanism".into());
        }
        let check_matrix = |name: &str, m: &Option<Vec<Vec<f64>>>, needed: bool| -> Result<()> {
            match (m, needed) {
                (None, true) => bad(format!("{name} is required by the informed mechanism")),
                (Some(_), false) => bad(format!("{name} given but the mechanism is not informed")),
                (Some(rows), true) => {
                    let square = rows.len() == self.n_vertices && rows.iter().all(|r| r.len() == self.n_vertices);
                    if !square {
                        return bad(format!("{name} must be {0}x{0}", self.n_vertices));
                    }
                    if rows.iter().flatten().any(|v| !v.is_finite()) {
                        return bad(format!("{name} has non-finite entries"));
                    }
                    Ok(())
                }
                (None, false) => Ok(()),
            }
        };
        check_matrix("a_inner", &self.a_inner, self.inner == InnerMechanism::Informed)?;
        check_matrix("a_outer", &self.a_outer, self.outer == OuterMechanism::Informed)?;
        Ok(())
    }
}

/// Name and shape of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Trainable tensors in the fixed order of [`param_layout`].
///
/// Tensors shared between mechanism variants appear first and under the same
/// names, so variants initialised from one seed start from identical values.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let p = |name: &str, shape: &[usize]| ParamSpec {
        name: name.to_string(),
        shape: shape.to_vec(),
    };
    let (w, dh, dz, dx) = (cfg.hidden_width, cfg.d_h, cfg.d_z, CONTROL_CHANNELS);
    let mut out = vec![
        p("init_h.w", &[dx, dh]),
        p("init_h.b", &[dh]),
        p("init_z.w", &[dh, dz]),
        p("init_z.b", &[dz]),
    ];
    let mut mlp = |prefix: &str, d_in: usize, d_out: usize| {
        out.push(p(&format!("{prefix}.0.w"), &[d_in, w]));
        out.push(p(&format!("{prefix}.0.b"), &[w]));
        for l in 1..cfg.n_layers - 1 {
            out.push(p(&format!("{prefix}.{l}.w"), &[w, w]));
            out.push(p(&format!("{prefix}.{l}.b"), &[w]));
        }
        out.push(p(&format!("{prefix}.out.w"), &[w, d_out]));
        out.push(p(&format!("{prefix}.out.b"), &[d_out]));
    };
    mlp("f", dh, dh * dx);
    mlp("g", dz, dz * dh);
    out.push(p("readout.w", &[dz, cfg.horizon]));
    out.push(p("readout.b", &[cfg.horizon]));
    if cfg.inner == InnerMechanism::Agc {
        out.push(p("g.agc_embed", &[cfg.n_vertices, cfg.agc_embed_dim]));
    }
    out
}

/// Closed-form trainable-scalar count.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (w, dh, dz, dx, l) = (cfg.hidden_width, cfg.d_h, cfg.d_z, CONTROL_CHANNELS, cfg.n_layers);
    let mlp = |d_in: usize, d_out: usize| (d_in + 1) * w + (l - 2) * (w + 1) * w + (w + 1) * d_out;
    let init = (dx + 1) * dh + (dh + 1) * dz;
    let readout = (dz + 1) * cfg.horizon;
    let agc = if cfg.inner == InnerMechanism::Agc {
        cfg.n_vertices * cfg.agc_embed_dim
    } else {
        0
    };
    init + mlp(dh, dh * dx) + mlp(dz, dz * dh) + readout + agc
}

/// Parameter values, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    layout: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl Params {
    /// Uniform `±1/sqrt(fan_in)` for weights and biases; the AGC embedding
    /// is uniform on `±sqrt(3)` (unit variance).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = param_layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let bound = if spec.name == "g.agc_embed" {
                    3f64.sqrt()
                } else {
                    let fan_in = fan_in(&layout, spec);
                    1.0 / (fan_in as f64).sqrt()
                };
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(spec.shape.clone(), data).expect("layout shape")
            })
            .collect();
        Self { layout, tensors }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = param_layout(cfg);
        if layout.len() != tensors.len() {
            return Err(CoreError::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(CoreError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { layout, tensors })
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layout
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Runtime count of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.layout == other.layout && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }
}

fn fan_in(layout: &[ParamSpec], spec: &ParamSpec) -> usize {
    if spec.name.ends_with(".w") {
        spec.shape[0]
    } else {
        // a bias shares the fan-in of its weight
        let w_name = format!("{}.w", spec.name.trim_end_matches(".b"));
        layout.iter().find(|s| s.name == w_name).map_or(1, |s| s.shape[0])
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Slots {
    init_h: Dense,
    init_z: Dense,
    f_hidden: Vec<Dense>,
    f_out: Dense,
    g_hidden: Vec<Dense>,
    g_out: Dense,
    readout: Dense,
    agc_embed: Option<usize>,
}

impl Slots {
    fn new(layout: &[ParamSpec], cfg: &ModelConfig) -> Self {
        let index: HashMap<&str, usize> = layout.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let dense = |prefix: &str| Dense {
            w: index[format!("{prefix}.w").as_str()],
            b: index[format!("{prefix}.b").as_str()],
        };
        let hidden = |net: &str| (0..cfg.n_layers - 1).map(|l| dense(&format!("{net}.{l}"))).collect();
        Self {
            init_h: dense("init_h"),
            init_z: dense("init_z"),
            f_hidden: hidden("f"),
            f_out: dense("f.out"),
            g_hidden: hidden("g"),
            g_out: dense("g.out"),
            readout: dense("readout"),
            agc_embed: index.get("g.agc_embed").copied(),
        }
    }
}

/// Graph constants and reshaped output layers, recorded once per forward
/// pass.
#[derive(Clone, Copy, Debug)]
pub struct FieldContext {
    /// Output layers viewed as `[W, d_out, d_in]` / `[d_out, d_in]`, so the
    /// fields come out as matrices without a reshape per stage.
    f_out: (Var, Var),
    g_out: (Var, Var),
    a_inner: Option<Var>,
    a_outer: Option<Var>,
    /// `I + softmax(relu(E Eᵀ))` for the AGC mechanism.
    agc_support: Option<Var>,
}

/// A model configuration with its parameter slots resolved.
#[derive(Clone, Debug)]
pub struct Gncde {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    slots: Slots,
}

impl Gncde {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let slots = Slots::new(&layout, &config);
        Ok(Self { config, layout, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> Params {
        Params::init(&self.config, seed)
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, params: &Params) -> Result<Vec<Var>> {
        self.check_params(params)?;
        Ok(params.tensors().iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape, params: &Params) -> Result<Vec<Var>> {
        self.check_params(params)?;
        Ok(params.tensors().iter().map(|t| tape.constant(t.clone())).collect())
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.layout() != self.layout.as_slice() {
            return Err(CoreError::Config(
                "parameters were built for a different model configuration".into(),
            ));
        }
        Ok(())
    }

    fn dense(&self, tape: &mut Tape, vars: &[Var], layer: Dense, x: Var) -> Result<Var> {
        Ok(tape.affine(x, vars[layer.w], vars[layer.b], "bvi,io->bvo")?)
    }

    /// Records the graph constants and the AGC support matrix.
    pub fn context(&self, tape: &mut Tape, vars: &[Var]) -> Result<FieldContext> {
        let as_const = |tape: &mut Tape, m: &Option<Vec<Vec<f64>>>| -> Result<Option<Var>> {
            m.as_ref()
                .map(|rows| Ok(tape.constant(Tensor::from_rows(rows)?)))
                .transpose()
        };
        let a_inner = as_const(tape, &self.config.a_inner)?;
        let a_outer = as_const(tape, &self.config.a_outer)?;
        let agc_support = match self.slots.agc_embed {
            Some(e) => Some(agc_support(tape, vars[e])?),
            None => None,
        };
        let (w, dh, dz) = (self.config.hidden_width, self.config.d_h, self.config.d_z);
        let as_matrix = |tape: &mut Tape, layer: Dense, rows: usize, cols: usize| -> Result<(Var, Var)> {
            Ok((
                tape.reshape(vars[layer.w], &[w, rows, cols])?,
                tape.reshape(vars[layer.b], &[rows, cols])?,
            ))
        };
        let f_out = as_matrix(tape, self.slots.f_out, dh, CONTROL_CHANNELS)?;
        let g_out = as_matrix(tape, self.slots.g_out, dz, dh)?;
        Ok(FieldContext {
            f_out,
            g_out,
            a_inner,
            a_outer,
            agc_support,
        })
    }

    /// `f`: `[B, V, d_h] -> [B, V, d_h, 2]`, one shared MLP per vertex.
    pub fn vector_field_f(&self, tape: &mut Tape, vars: &[Var], ctx: &FieldContext, h: Var) -> Result<Var> {
        let mut x = h;
        for &layer in &self.slots.f_hidden {
            let y = self.dense(tape, vars, layer, x)?;
            x = tape.tanh(y);
        }
        let (w, b) = ctx.f_out;
        Ok(tape.affine(x, w, b, "bvi,ihx->bvhx")?)
    }

    /// `g`: `[B, V, d_z] -> [B, V, d_z, d_h]`; the vertex-mixing slot follows
    /// the last hidden layer.
    pub fn vector_field_g(&self, tape: &mut Tape, vars: &[Var], ctx: &FieldContext, z: Var) -> Result<Var> {
        let n_hidden = self.slots.g_hidden.len();
        let mut x = z;
        for (l, &layer) in self.slots.g_hidden.iter().enumerate() {
            let last = l + 1 == n_hidden;
            let y = match (last, self.config.inner) {
                (true, InnerMechanism::Agc) => {
                    let support = ctx
                        .agc_support
                        .ok_or_else(|| CoreError::Config("AGC support missing from context".into()))?;
                    agc_layer(tape, support, x, vars[layer.w], vars[layer.b])?
                }
                _ => self.dense(tape, vars, layer, x)?,
            };
            x = tape.tanh(y);
            if last && self.config.inner == InnerMechanism::Informed {
                let a = ctx
                    .a_inner
                    .ok_or_else(|| CoreError::Config("a_inner missing for the informed inner mechanism".into()))?;
                x = tape.contract(a, x, "mn,bnw->bmw")?;
            }
        }
        let (w, b) = ctx.g_out;
        Ok(tape.affine(x, w, b, "bvi,izh->bvzh")?)
    }

    /// Right-hand side of the coupled system for one stage.
    pub fn derivatives(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ctx: &FieldContext,
        h: Var,
        z: Var,
        dx: Var,
    ) -> Result<(Var, Var)> {
        let f = self.vector_field_f(tape, vars, ctx, h)?;
        let dh = tape.contract(f, dx, "bvhx,bvx->bvh")?;
        let g = self.vector_field_g(tape, vars, ctx, z)?;
        let dz = informed_contraction(tape, g, ctx.a_outer, dh)?;
        Ok((dh, dz))
    }

    /// `H(0)` and `Z(0)` from the control value at the first knot.
    pub fn init_states(&self, tape: &mut Tape, vars: &[Var], x0: Var) -> Result<(Var, Var)> {
        let h0 = self.dense(tape, vars, self.slots.init_h, x0)?;
        let z0 = self.dense(tape, vars, self.slots.init_z, h0)?;
        Ok((h0, z0))
    }

    /// Builds the control paths of a batch of input windows.
    pub fn control_paths(&self, inputs: &[&[f64]]) -> Result<Vec<ControlPath>> {
        let v = self.config.n_vertices;
        inputs
            .iter()
            .map(|window| {
                if window.len() != self.config.input_len * v {
                    return Err(CoreError::Config(format!(
                        "input window has {} values, expected {}x{}",
                        window.len(),
                        self.config.input_len,
                        v
                    )));
                }
                let scaled: Vec<f64> = window.iter().map(|y| y * self.config.obs_scale).collect();
                ControlPath::new(&scaled, v, self.config.interpolation)
            })
            .collect()
    }

    /// Integrates `H` and `Z` across the whole control span; returns
    /// `(H(T), Z(T))`, each `[B, V, d]`.
    pub fn integrate(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ctx: &FieldContext,
        paths: &[ControlPath],
    ) -> Result<(Var, Var)> {
        if paths.is_empty() {
            return Err(CoreError::Config("empty batch".into()));
        }
        let (b, v) = (paths.len(), self.config.n_vertices);
        let x0: Vec<f64> = paths.iter().flat_map(|p| p.value(0.0)).collect();
        let x0 = tape.constant(Tensor::new(vec![b, v, CONTROL_CHANNELS], x0)?);
        let (h, z) = self.init_states(tape, vars, x0)?;

        integrate_controlled(tape, paths, self.config.substeps, h, z, |tape, h, z, dx| {
            self.derivatives(tape, vars, ctx, h, z, dx)
        })
    }

    /// Predictions `[B, horizon, V]` for a batch of input windows.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]]) -> Result<Var> {
        let paths = self.control_paths(inputs)?;
        let ctx = self.context(tape, vars)?;
        let (_, z_t) = self.integrate(tape, vars, &ctx, &paths)?;
        let out = self.dense(tape, vars, self.slots.readout, z_t)?;
        let out = tape.scale(out, 1.0 / self.config.obs_scale);
        Ok(tape.permute(out, &[0, 2, 1])?)
    }

    /// Forward pass plus the MAE against the batch targets.
    pub fn forward_loss(&self, tape: &mut Tape, vars: &[Var], samples: &[&ForecastSample]) -> Result<(Var, Var)> {
        let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
        let pred = self.forward(tape, vars, &inputs)?;
        let (h, v) = (self.config.horizon, self.config.n_vertices);
        let mut target = Vec::with_capacity(samples.len() * h * v);
        for s in samples {
            if s.target.len() != h * v {
                return Err(CoreError::Config(format!(
                    "target window has {} values, expected {h}x{v}",
                    s.target.len()
                )));
            }
            target.extend_from_slice(&s.target);
        }
        let target = tape.constant(Tensor::new(vec![samples.len(), h, v], target)?);
        let diff = tape.sub(pred, target)?;
        let abs = tape.abs(diff);
        let loss = tape.mean(abs);
        Ok((pred, loss))
    }

    /// Prediction for one input window, `horizon x V` row-major.
    pub fn predict(&self, params: &Params, input: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constant(&mut tape, params)?;
        let out = self.forward(&mut tape, &vars, &[input])?;
        let t = tape.value(out).clone();
        let (h, v) = (self.config.horizon, self.config.n_vertices);
        Ok(t.reshaped(&[h, v])?)
    }
}

/// `I + softmax_rows(relu(E Eᵀ))`.
pub fn agc_support(tape: &mut Tape, embed: Var) -> Result<Var> {
    let n = tape.shape(embed)[0];
    let sim = tape.contract(embed, embed, "ve,ue->vu")?;
    let sim = tape.relu(sim);
    let adaptive = tape.softmax(sim, 1)?;
    let eye = tape.constant(Tensor::eye(n));
    Ok(tape.add(eye, adaptive)?)
}

/// Adaptive graph convolution `(I + Ã) X W + b` on `X: [B, V, d]`.
pub fn agc_layer(tape: &mut Tape, support: Var, x: Var, w: Var, b: Var) -> Result<Var> {
    let mixed = tape.contract(support, x, "mn,bnw->bmw")?;
    Ok(tape.affine(mixed, w, b, "bvi,io->bvo")?)
}

/// `(dZ)_{bkz} = Σ_h G_{bkzh} (A dH)_{bkh}`; `A = None` means identity.
pub fn informed_contraction(tape: &mut Tape, g: Var, a_outer: Option<Var>, dh: Var) -> Result<Var> {
    let driven = match a_outer {
        Some(a) => tape.contract(a, dh, "mn,bnh->bmh")?,
        None => dh,
    };
    Ok(tape.contract(g, driven, "bvzh,bvh->bvz")?)
}

/// Which control time an RK4 stage evaluates at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RkStage {
    Start,
    Mid,
    End,
}

/// Integrates the coupled `(H, Z)` system driven by a batch of control paths
/// with `substeps` RK4 steps per knot interval.
///
/// `field(tape, h, z, dx)` returns `(dH, dZ)` given the control derivative
/// `dx` (`[B, V, channels]`) at the stage time. Steps are aligned to the knots,
/// so the control derivative is evaluated inside a single spline piece.
pub fn integrate_controlled<F>(
    tape: &mut Tape,
    paths: &[ControlPath],
    substeps: usize,
    h0: Var,
    z0: Var,
    mut field: F,
) -> Result<(Var, Var)>
where
    F: FnMut(&mut Tape, Var, Var, Var) -> Result<(Var, Var)>,
{
    let first = paths.first().ok_or_else(|| CoreError::Config("empty batch".into()))?;
    if substeps == 0 {
        return Err(CoreError::Config("substeps must be at least 1".into()));
    }
    let b = paths.len();
    let (v, channels) = (first.n_vertices(), CONTROL_CHANNELS);
    let step = 1.0 / substeps as f64;
    let dx_at = |tape: &mut Tape, interval: usize, t: f64| -> Result<Var> {
        let d: Vec<f64> = paths.iter().flat_map(|p| p.derivative_in(interval, t)).collect();
        Ok(tape.constant(Tensor::new(vec![b, v, channels], d)?))
    };
    let (mut h, mut z) = (h0, z0);
    let mut n_step = 0;
    for interval in 0..first.n_intervals() {
        for sub in 0..substeps {
            let t0 = interval as f64 + sub as f64 * step;
            let dx0 = dx_at(tape, interval, t0)?;
            let dx_mid = dx_at(tape, interval, t0 + 0.5 * step)?;
            let dx1 = dx_at(tape, interval, t0 + step)?;
            let next = rk4_step(tape, &[h, z], step, |tape, state, stage| {
                let dx = match stage {
                    RkStage::Start => dx0,
                    RkStage::Mid => dx_mid,
                    RkStage::End => dx1,
                };
                let (dh, dz) = field(tape, state[0], state[1], dx)?;
                Ok(vec![dh, dz])
            })?;
            h = next[0];
            z = next[1];
            n_step += 1;
            if !tape.value(h).is_finite() || !tape.value(z).is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite hidden state at integration step {n_step} (t = {})",
                    t0 + step
                )));
            }
        }
    }
    Ok((h, z))
}

/// One classical RK4 step of size `h` for a system of tape variables.
pub fn rk4_step<F>(tape: &mut Tape, state: &[Var], h: f64, mut field: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, &[Var], RkStage) -> Result<Vec<Var>>,
{
    let axpy = |tape: &mut Tape, y: &[Var], k: &[Var], c: f64| -> Result<Vec<Var>> {
        y.iter()
            .zip(k)
            .map(|(&yi, &ki)| {
                let s = tape.scale(ki, c);
                Ok(tape.add(yi, s)?)
            })
            .collect()
    };
    let k1 = field(tape, state, RkStage::Start)?;
    let y2 = axpy(tape, state, &k1, 0.5 * h)?;
    let k2 = field(tape, &y2, RkStage::Mid)?;
    let y3 = axpy(tape, state, &k2, 0.5 * h)?;
    let k3 = field(tape, &y3, RkStage::Mid)?;
    let y4 = axpy(tape, state, &k3, h)?;
    let k4 = field(tape, &y4, RkStage::End)?;
    let mut out = Vec::with_capacity(state.len());
    for i in 0..state.len() {
        let s23 = tape.add(k2[i], k3[i])?;
        let s23 = tape.scale(s23, 2.0);
        let s14 = tape.add(k1[i], k4[i])?;
        let total = tape.add(s14, s23)?;
        let incr = tape.scale(total, h / 6.0);
        out.push(tape.add(state[i], incr)?);
    }
    Ok(out)
}

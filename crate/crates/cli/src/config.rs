//! Layered run configuration.
//!
//! Resolution order, lowest to highest precedence:
//! built-in defaults < preset < config file < command-line flags.
//! Every layer is merged as a JSON tree and the result is deserialised with
//! unknown fields rejected, so a misspelt key fails instead of being ignored.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gncde_core::advection::SimulationConfig;
use gncde_core::grid::ModelSize;
use gncde_core::model::{InnerMechanism, OuterMechanism};
use gncde_core::topology::{GraphSpec, VertexAdjacency};
use gncde_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Everything a subcommand may need, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled graph name (`g4`, `g10`) or path to a graph file.
    pub graph: String,
    /// Number of simulated series.
    pub n_series: usize,
    /// Grid seeds; each drives both the simulated dataset and training.
    pub seeds: Vec<u64>,
    pub simulation: SimulationConfig,
    pub model: ModelSize,
    /// Mechanisms for single-model training.
    pub inner: InnerMechanism,
    pub outer: OuterMechanism,
    pub train: TrainConfig,
    /// Adds the both-informed variant to the grid.
    pub include_informed_both: bool,
    /// Trains grid variants on parallel worker threads.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: "g10".into(),
            n_series: 500,
            seeds: vec![0, 1, 2, 3, 4],
            simulation: SimulationConfig::default(),
            model: ModelSize::default(),
            inner: InnerMechanism::Identity,
            outer: OuterMechanism::Informed,
            train: TrainConfig::default(),
            include_informed_both: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced sizes that run the 10-node grid in under half an hour.
    Desk,
    /// Dataset sizes of the reference experiments; far beyond a desk budget.
    Paper,
}

impl Preset {
    /// Overlay for a graph with `n_vertices` vertices.
    fn overlay(self, n_vertices: usize) -> Value {
        let small = n_vertices <= 4;
        match self {
            Preset::Desk => serde_json::json!({
                "n_series": if small { 200 } else { 500 },
                "seeds": [0, 1, 2, 3, 4],
                "model": { "d_h": 16, "d_z": 16, "hidden_width": 8, "n_layers": 3 },
                "train": { "epochs": 30, "batch_size": 32 },
            }),
            Preset::Paper => serde_json::json!({
                "n_series": if small { 1000 } else { 10000 },
                "seeds": [0, 1, 2, 3, 4],
                "model": { "d_h": 32, "d_z": 32, "hidden_width": 64, "n_layers": 3 },
                "train": { "epochs": 100, "batch_size": 64 },
            }),
        }
    }
}

/// Resolves a graph argument: an existing file wins, otherwise the bundled
/// names `g4` / `g10` (with or without `.json`).
pub fn load_graph(name: &str) -> Result<GraphSpec> {
    let path = Path::new(name);
    if path.is_file() {
        return GraphSpec::load(path).with_context(|| format!("loading graph {name}"));
    }
    let stem = name.strip_suffix(".json").unwrap_or(name);
    let stem = stem.rsplit('/').next().unwrap_or(stem);
    match stem {
        "g4" => Ok(GraphSpec::from_adjacency(&VertexAdjacency::four_node())),
        "g10" => Ok(GraphSpec::from_adjacency(&VertexAdjacency::ten_node())),
        _ => bail!(invalid(format!(
            "graph `{name}` is neither a readable file nor a bundled graph (g4, g10)"
        ))),
    }
}

/// Inputs to [`resolve`], one per layer.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub preset: Option<Preset>,
    pub file: Option<String>,
    /// `(dotted key, value)` from dedicated flags and `--set`, in order.
    pub overrides: Vec<(String, Value)>,
}

pub fn resolve(layers: &Layers) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    let file_tree = match &layers.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("config file {path} is not valid JSON: {e}")))?;
            if !v.is_object() {
                bail!(invalid(format!("config file {path} must hold a JSON object")));
            }
            Some(v)
        }
        None => None,
    };

    // the preset depends on the graph, which may come from any layer
    let graph = layers
        .overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "graph")
        .and_then(|(_, v)| v.as_str().map(str::to_string))
        .or_else(|| file_tree.as_ref()?.get("graph")?.as_str().map(str::to_string))
        .unwrap_or_else(|| RunConfig::default().graph);
    let preset = layers.preset.unwrap_or(Preset::Desk);
    let n_vertices = load_graph(&graph)?.n_vertices;
    merge(&mut tree, preset.overlay(n_vertices));

    if let Some(v) = file_tree {
        check_keys(&tree, &v, "")?;
        merge(&mut tree, v);
    }
    for (key, value) in &layers.overrides {
        set_path(&mut tree, key, value.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| invalid(format!("configuration: {e}")))?;
    cfg.train.validate()?;
    if cfg.n_series == 0 {
        bail!(invalid("n_series must be at least 1".into()));
    }
    Ok(cfg)
}

/// A configuration error (exit code 3).
pub fn invalid(msg: String) -> gncde_core::CoreError {
    gncde_core::CoreError::Config(msg)
}

/// Parses a flag value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_assignment(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| invalid(format!("--set expects key=value, got `{raw}`")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn known_keys(obj: &Map<String, Value>) -> String {
    obj.keys().cloned().collect::<Vec<_>>().join(", ")
}

/// Rejects keys in `overlay` that the defaults do not have.
fn check_keys(base: &Value, overlay: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(o)) = (base, overlay) {
        for (k, v) in o {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match b.get(k) {
                None => bail!(invalid(format!(
                    "unknown config key `{path}` (known here: {})",
                    known_keys(b)
                ))),
                Some(inner) => check_keys(inner, v, &path)?,
            }
        }
    }
    Ok(())
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(obj) => obj,
            _ => bail!(invalid(format!(
                "config key `{key}`: `{}` is not a section",
                parts[..i].join(".")
            ))),
        };
        if !obj.contains_key(*part) {
            bail!(invalid(format!(
                "unknown config key `{key}` (known here: {})",
                known_keys(obj)
            )));
        }
        let slot = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

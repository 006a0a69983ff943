//! The inner × outer informedness grid and its result tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::advection::SimulationConfig;
use crate::control::Interpolation;
use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{InformedMatrixSpec, InnerMechanism, ModelConfig, OuterMechanism};
use crate::topology::GraphSpec;
use crate::train::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub inner: InnerMechanism,
    pub outer: OuterMechanism,
}

impl Variant {
    pub const fn new(inner: InnerMechanism, outer: OuterMechanism) -> Self {
        Self { inner, outer }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.inner, self.outer)
    }
}

/// The five reference variants, in table order.
pub const STANDARD_VARIANTS: [Variant; 5] = [
    Variant::new(InnerMechanism::Identity, OuterMechanism::Identity),
    Variant::new(InnerMechanism::Informed, OuterMechanism::Identity),
    Variant::new(InnerMechanism::Identity, OuterMechanism::Informed),
    Variant::new(InnerMechanism::Agc, OuterMechanism::Identity),
    Variant::new(InnerMechanism::Agc, OuterMechanism::Informed),
];

/// Both mixing slots informed; supported but not part of the standard set.
pub const INFORMED_BOTH: Variant = Variant::new(InnerMechanism::Informed, OuterMechanism::Informed);

/// Architecture shared by every variant of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSize {
    pub d_h: usize,
    pub d_z: usize,
    pub hidden_width: usize,
    pub n_layers: usize,
    pub agc_embed_dim: usize,
    pub substeps: usize,
    pub interpolation: Interpolation,
    pub informed: InformedMatrixSpec,
}

impl Default for ModelSize {
    fn default() -> Self {
        Self {
            d_h: 16,
            d_z: 16,
            hidden_width: 8,
            n_layers: 3,
            agc_embed_dim: 10,
            substeps: 2,
            interpolation: Interpolation::NaturalCubic,
            informed: InformedMatrixSpec::default(),
        }
    }
}

impl ModelSize {
    pub fn model_config(&self, graph: &GraphSpec, variant: Variant) -> Result<ModelConfig> {
        let adj = graph.adjacency()?;
        let mut cfg = ModelConfig::for_graph(&adj, variant.inner, variant.outer);
        cfg.d_h = self.d_h;
        cfg.d_z = self.d_z;
        cfg.hidden_width = self.hidden_width;
        cfg.n_layers = self.n_layers;
        cfg.agc_embed_dim = self.agc_embed_dim;
        cfg.substeps = self.substeps;
        cfg.interpolation = self.interpolation;
        cfg.set_mechanisms(&adj, variant.inner, variant.outer, self.informed);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One trained grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub inner: InnerMechanism,
    pub outer: OuterMechanism,
    /// Test MAE of the best-validation parameters.
    pub mae: f64,
    pub n_params: usize,
    pub epochs_to_threshold: usize,
    pub seed: u64,
    pub wall_time: f64,
}

impl ExperimentResult {
    pub fn variant(&self) -> Variant {
        Variant::new(self.inner, self.outer)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Sequential,
    /// One worker thread per variant.
    Parallel,
}

/// Trains every variant on `data` from the same seed. `on_result` sees each
/// result as soon as it exists (in variant order), so callers can persist
/// partial grids.
pub fn run_grid(
    graph: &GraphSpec,
    data: &Dataset,
    size: &ModelSize,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    execution: Execution,
    mut on_result: impl FnMut(&ExperimentResult) -> Result<()>,
) -> Result<Vec<ExperimentResult>> {
    let configs: Vec<ModelConfig> = variants
        .iter()
        .map(|&v| size.model_config(graph, v))
        .collect::<Result<_>>()?;
    let run_one = |(variant, cfg): (&Variant, ModelConfig)| -> Result<ExperimentResult> {
        let out = train(cfg, None, data, train_cfg.clone())?;
        Ok(ExperimentResult {
            inner: variant.inner,
            outer: variant.outer,
            mae: out.test_mae,
            n_params: out.n_params,
            epochs_to_threshold: out.epochs_to_threshold,
            seed: train_cfg.seed,
            wall_time: out.wall_time,
        })
    };
    let mut results = Vec::with_capacity(variants.len());
    match execution {
        Execution::Sequential => {
            for job in variants.iter().zip(configs) {
                let variant = *job.0;
                let r = run_one(job).map_err(|e| annotate(e, variant))?;
                on_result(&r)?;
                results.push(r);
            }
        }
        Execution::Parallel => {
            let outcomes: Vec<Result<ExperimentResult>> = std::thread::scope(|s| {
                let handles: Vec<_> = variants
                    .iter()
                    .zip(configs)
                    .map(|job| s.spawn(move || run_one(job)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(CoreError::State("grid worker panicked".into())))
                    })
                    .collect()
            });
            for (variant, r) in variants.iter().zip(outcomes) {
                let r = r.map_err(|e| annotate(e, *variant))?;
                on_result(&r)?;
                results.push(r);
            }
        }
    }
    Ok(results)
}

fn annotate(e: CoreError, variant: Variant) -> CoreError {
    match e {
        CoreError::Numeric(m) => CoreError::Numeric(format!("variant {variant}: {m}")),
        other => other,
    }
}

/// Runs the grid once per seed; seed `s` drives both the simulated dataset
/// and the training run.
#[allow(clippy::too_many_arguments)]
pub fn run_grid_seeds(
    graph: &GraphSpec,
    sim: &SimulationConfig,
    n_series: usize,
    size: &ModelSize,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    execution: Execution,
    mut on_result: impl FnMut(&ExperimentResult) -> Result<()>,
) -> Result<Vec<ExperimentResult>> {
    let mut all = Vec::new();
    for &seed in seeds {
        let sim = SimulationConfig { seed, ..sim.clone() };
        let data = Dataset::generate(graph, &sim, n_series)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        all.extend(run_grid(graph, &data, size, &cfg, variants, execution, &mut on_result)?);
    }
    Ok(all)
}

const CSV_HEADER: [&str; 6] = ["inner", "outer", "mae", "n_params", "epochs_to_threshold", "seed"];

/// CSV writer that emits the header once and rows as they arrive.
pub struct ResultsCsv<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> ResultsCsv<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn push(&mut self, r: &ExperimentResult) -> Result<()> {
        self.out.write_record([
            r.inner.to_string(),
            r.outer.to_string(),
            format!("{}", r.mae),
            r.n_params.to_string(),
            r.epochs_to_threshold.to_string(),
            r.seed.to_string(),
        ])?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_results_csv(results: &[ExperimentResult], w: impl Write) -> Result<()> {
    let mut out = ResultsCsv::new(w)?;
    for r in results {
        out.push(r)?;
    }
    Ok(())
}

/// Reads rows written by [`write_results_csv`]; wall time is not stored and
/// comes back as zero.
pub fn read_results_csv(r: impl Read) -> Result<Vec<ExperimentResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CoreError::Dataset(format!("unexpected results header {header:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let num_err = |what: &str| CoreError::Dataset(format!("bad {what} in results row {rec:?}"));
            Ok(ExperimentResult {
                inner: field(0).parse()?,
                outer: field(1).parse()?,
                mae: field(2).parse().map_err(|_| num_err("mae"))?,
                n_params: field(3).parse().map_err(|_| num_err("n_params"))?,
                epochs_to_threshold: field(4).parse().map_err(|_| num_err("epochs_to_threshold"))?,
                seed: field(5).parse().map_err(|_| num_err("seed"))?,
                wall_time: 0.0,
            })
        })
        .collect()
}

/// Inner mechanisms down the rows, outer across the columns; each cell is
/// the mean test MAE over seeds with the parameter count in parentheses.
pub fn format_table(results: &[ExperimentResult]) -> String {
    let mut cells: BTreeMap<(usize, usize), (f64, usize, usize)> = BTreeMap::new();
    let row = |m: InnerMechanism| match m {
        InnerMechanism::Identity => 0,
        InnerMechanism::Informed => 1,
        InnerMechanism::Agc => 2,
    };
    let col = |m: OuterMechanism| match m {
        OuterMechanism::Identity => 0,
        OuterMechanism::Informed => 1,
    };
    for r in results {
        let e = cells
            .entry((row(r.inner), col(r.outer)))
            .or_insert((0.0, 0, r.n_params));
        e.0 += r.mae;
        e.1 += 1;
    }
    let inner_names = ["identity", "informed", "agc"];
    let header = format!("{:<12}{:>22}{:>22}", "inner\\outer", "identity", "informed");
    let mut lines = vec![header.clone(), "-".repeat(header.len())];
    for (i, name) in inner_names.iter().enumerate() {
        if !cells.keys().any(|(r, _)| *r == i) {
            continue;
        }
        let cell = |c: usize| match cells.get(&(i, c)) {
            Some((sum, n, p)) => format!("{:.4} ({p})", sum / *n as f64),
            None => "-".to_string(),
        };
        lines.push(format!("{name:<12}{:>22}{:>22}", cell(0), cell(1)));
    }
    let seeds: std::collections::BTreeSet<u64> = results.iter().map(|r| r.seed).collect();
    lines.push(format!(
        "mean test MAE over {} seed(s); trainable parameters in parentheses",
        seeds.len()
    ));
    lines.join("\n") + "\n"
}

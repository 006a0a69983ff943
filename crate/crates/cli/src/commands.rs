//! Subcommand bodies. Each returns once its outputs are on disk; progress
//! goes to stderr so stdout stays machine-readable where it carries data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gncde_autodiff::TensorFile;
use gncde_core::dataset::Dataset;
use gncde_core::grid::{
    format_table, run_grid_seeds, Execution, ExperimentResult, ResultsCsv, Variant, INFORMED_BOTH, STANDARD_VARIANTS,
};
use gncde_core::model::{InnerMechanism, OuterMechanism};
use gncde_core::topology::{split_incidence, GraphSpec};
use gncde_core::train::{evaluate, split_indices, write_metrics, Trainer};
use serde::Serialize;

use crate::config::{invalid, load_graph, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    /// Every window in the dataset.
    All,
}

/// Provenance record written next to every artifact.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a [String],
    config: &'a RunConfig,
    graph: &'a GraphSpec,
    seeds: Vec<u64>,
    outputs: Vec<String>,
}

fn write_manifest(
    path: &Path,
    argv: &[String],
    cfg: &RunConfig,
    graph: &GraphSpec,
    seeds: Vec<u64>,
    outputs: &[&Path],
) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: argv,
        config: cfg,
        graph,
        seeds,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `<path>.manifest.json`.
fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn inspect(graph: &str, precision: usize) -> Result<()> {
    let spec = load_graph(graph)?;
    let network = spec.network(spec.edge_length.unwrap_or(100))?;
    let edges = network.edges().edges();
    println!("{} vertices, {} edges (1-based)", network.n_vertices(), edges.len());
    for (i, e) in edges.iter().enumerate() {
        println!("  e{}: {e}", i + 1);
    }
    let parts = split_incidence(network.incidence());
    let tables = [
        ("incidence I", network.incidence().matrix()),
        ("positive part I+", &parts.positive),
        ("negative part I-", &parts.negative),
        ("conservative part Ic", &parts.conservative),
        (
            "edge transition A_E (rows: destination, cols: source)",
            network.transition().matrix(),
        ),
    ];
    for (title, m) in tables {
        println!("\n{title}");
        print!("{}", m.to_table(precision));
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &str, argv: &[String]) -> Result<()> {
    let graph = load_graph(&cfg.graph)?;
    let data = Dataset::generate(&graph, &cfg.simulation, cfg.n_series)?;
    let path = Path::new(out);
    data.save(path).with_context(|| format!("writing {out}"))?;
    write_manifest(
        &manifest_beside(path),
        argv,
        cfg,
        &graph,
        vec![cfg.simulation.seed],
        &[path],
    )?;
    eprintln!(
        "wrote {} windows ({} series, {} vertices) to {out}",
        data.len(),
        cfg.n_series,
        data.n_vertices()
    );
    Ok(())
}

pub fn dataset_summary(data: &str, split_seed: u64) -> Result<()> {
    let d = Dataset::load(data).with_context(|| format!("reading {data}"))?;
    let h = &d.header;
    println!("dataset      {data}");
    println!("vertices     {}", h.n_vertices);
    println!(
        "windows      {} (input {}, target {})",
        d.len(),
        h.input_len,
        h.target_len
    );
    println!("seed         {}", h.seed);
    println!(
        "simulation   shift {} per step, {} steps",
        h.simulation.shift_per_step, h.simulation.n_steps
    );
    let split = split_indices(d.len(), [0.8, 0.1, 0.1], split_seed);
    println!(
        "split        train {} / val {} / test {} (seed {split_seed})",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let values = d.samples.iter().flat_map(|s| s.input.iter().chain(&s.target));
    let (mut n, mut sum, mut abs, mut min, mut max) = (0usize, 0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        n += 1;
        sum += v;
        abs += v.abs();
        min = min.min(v);
        max = max.max(v);
    }
    if n > 0 {
        println!(
            "values       mean {:.4}, mean |y| {:.4}, min {:.4}, max {:.4}",
            sum / n as f64,
            abs / n as f64,
            min,
            max
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    inner: InnerMechanism,
    outer: OuterMechanism,
    test_mae: f64,
    best_val: f64,
    best_epoch: usize,
    epochs_run: usize,
    epochs_to_threshold: usize,
    n_params: usize,
    wall_time: f64,
}

pub fn train(cfg: &RunConfig, data: Option<&str>, resume: Option<&str>, out: &str, argv: &[String]) -> Result<()> {
    let dir = Path::new(out);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {out}"))?;
    let dataset = match data {
        Some(path) => Dataset::load(path).with_context(|| format!("reading {path}"))?,
        None => {
            let graph = load_graph(&cfg.graph)?;
            Dataset::generate(&graph, &cfg.simulation, cfg.n_series)?
        }
    };
    let graph = dataset.header.graph.clone();
    let mut trainer = match resume {
        Some(ckpt) => {
            let file = TensorFile::load(ckpt).with_context(|| format!("reading checkpoint {ckpt}"))?;
            let mut t = Trainer::from_checkpoint(file, &dataset)?;
            let done = t.state().epoch;
            t.set_epochs(cfg.train.epochs.max(done));
            eprintln!("resuming {ckpt} at epoch {done} of {}", cfg.train.epochs.max(done));
            t
        }
        None => {
            let model_cfg = cfg.model.model_config(&graph, Variant::new(cfg.inner, cfg.outer))?;
            Trainer::new(model_cfg, None, &dataset, cfg.train.clone())?
        }
    };

    let ckpt_path = dir.join("checkpoint.bin");
    let metrics_path = dir.join("metrics.ndjson");
    let summary_path = dir.join("summary.json");
    write_manifest(
        &dir.join("manifest.json"),
        argv,
        cfg,
        &graph,
        vec![dataset.header.seed, trainer.config().seed],
        &[&ckpt_path, &metrics_path, &summary_path],
    )?;

    let write_log = |trainer: &Trainer| -> Result<()> {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        write_metrics(&trainer.state().log, &mut w)?;
        w.flush()?;
        Ok(())
    };
    let mut saved = false;
    while !trainer.is_finished() {
        let (train_mae, val) = trainer.run_epoch()?;
        let s = trainer.state();
        match val {
            Some(v) => eprintln!(
                "epoch {:>3}  train {train_mae:.4}  val {v:.4}  best {:.4}",
                s.epoch, s.best_val
            ),
            None => eprintln!("epoch {:>3}  train {train_mae:.4}", s.epoch),
        }
        trainer.save_checkpoint(&ckpt_path)?;
        write_log(&trainer)?;
        saved = true;
    }
    if !saved {
        trainer.save_checkpoint(&ckpt_path)?;
        write_log(&trainer)?;
    }

    let outcome = trainer.finish()?;
    let summary = TrainSummary {
        inner: outcome.model.inner,
        outer: outcome.model.outer,
        test_mae: outcome.test_mae,
        best_val: outcome.best_val,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        epochs_to_threshold: outcome.epochs_to_threshold,
        n_params: outcome.n_params,
        wall_time: outcome.wall_time,
    };
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "test MAE {:.6}  (best val {:.6} at epoch {}, {} parameters)",
        summary.test_mae, summary.best_val, summary.best_epoch, summary.n_params
    );
    Ok(())
}

pub fn eval(checkpoint: &str, data: &str, split: EvalSplit, latest: bool) -> Result<()> {
    let dataset = Dataset::load(data).with_context(|| format!("reading {data}"))?;
    let file = TensorFile::load(checkpoint).with_context(|| format!("reading checkpoint {checkpoint}"))?;
    let trainer = Trainer::from_checkpoint(file, &dataset)?;
    let idx: Vec<usize> = match split {
        EvalSplit::Train => trainer.split().train.clone(),
        EvalSplit::Val => trainer.split().val.clone(),
        EvalSplit::Test => trainer.split().test.clone(),
        EvalSplit::All => (0..dataset.len()).collect(),
    };
    if idx.is_empty() {
        bail!(invalid(
            format!("the {split:?} split of {data} is empty").to_lowercase()
        ));
    }
    let samples: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
    let state = trainer.state();
    let params = if latest { &state.params } else { &state.best_params };
    let mae = evaluate(trainer.model(), params, &samples, trainer.config().batch_size)?;
    println!("{mae:.9}");
    eprintln!(
        "{} parameters, {:?} split, {} windows",
        if latest { "latest" } else { "best" },
        split,
        samples.len()
    );
    Ok(())
}

pub fn grid(cfg: &RunConfig, out: Option<&str>, argv: &[String]) -> Result<()> {
    let graph = load_graph(&cfg.graph)?;
    let mut variants = STANDARD_VARIANTS.to_vec();
    if cfg.include_informed_both {
        variants.push(INFORMED_BOTH);
    }
    let execution = if cfg.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let sink: Box<dyn Write> = match out {
        Some(path) => {
            let p = Path::new(path);
            write_manifest(&manifest_beside(p), argv, cfg, &graph, cfg.seeds.clone(), &[p])?;
            Box::new(File::create(p).with_context(|| format!("creating {path}"))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut csv = ResultsCsv::new(sink)?;
    let on_result = |r: &ExperimentResult| -> gncde_core::Result<()> {
        eprintln!(
            "seed {} inner {} / outer {}: MAE {:.4} ({} params, {:.1}s)",
            r.seed, r.inner, r.outer, r.mae, r.n_params, r.wall_time
        );
        csv.push(r)
    };
    let results = run_grid_seeds(
        &graph,
        &cfg.simulation,
        cfg.n_series,
        &cfg.model,
        &cfg.train,
        &variants,
        &cfg.seeds,
        execution,
        on_result,
    )?;
    eprintln!("\n{}", format_table(&results));
    Ok(())
}

pub fn export_csv(data: &str, out: Option<&str>) -> Result<()> {
    let d = Dataset::load(data).with_context(|| format!("reading {data}"))?;
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {path}"))?);
            d.write_csv(&mut w)?;
            w.flush()?;
        }
        None => {
            // buffered so a closed pipe surfaces as a plain I/O error
            let mut buf = Vec::new();
            d.write_csv(&mut buf)?;
            std::io::stdout().lock().write_all(&buf)?;
        }
    }
    Ok(())
}

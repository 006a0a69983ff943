//! `gncde`: simulate graph advection, train topology-informed graph neural
//! CDEs and reproduce the informedness grid.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage error,
//! 3 invalid input or configuration, 4 numeric abort (non-finite values).

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gncde_autodiff::AutodiffError;
use gncde_core::model::{InnerMechanism, OuterMechanism};
use gncde_core::CoreError;
use serde_json::Value;

use crate::config::{parse_assignment, Layers, Preset};

#[derive(Parser, Debug)]
#[command(name = "gncde", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the edge list, incidence matrices and edge transition matrix.
    Inspect {
        /// Bundled graph name (g4, g10) or graph file.
        #[arg(long, default_value = "g10")]
        graph: String,
        /// Decimal places in the printed tables.
        #[arg(long, default_value_t = 2)]
        precision: usize,
    },
    /// Simulate advection series and write a windowed dataset.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        series: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Segments moved per step.
        #[arg(long)]
        sigma: Option<usize>,
        /// Advection steps; each series has steps + 1 measurements.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: String,
    },
    /// Summarise a dataset file.
    Dataset {
        #[arg(long)]
        data: String,
        /// Seed used to show the train/validation/test partition.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// Dataset file; simulated from the configuration when omitted.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        inner: Option<InnerMechanism>,
        #[arg(long)]
        outer: Option<OuterMechanism>,
        /// Training seed (initialisation, split and shuffles).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<String>,
        /// Output directory for checkpoint, metrics, summary and manifest.
        #[arg(long)]
        out: String,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value_t = commands::EvalSplit::Test)]
        split: commands::EvalSplit,
        /// Use the latest instead of the best-validation parameters.
        #[arg(long)]
        latest: bool,
    },
    /// Train every informedness variant over several seeds.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// Comma-separated seeds, each driving dataset and training.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        series: Option<usize>,
        /// One worker thread per variant.
        #[arg(long)]
        parallel: bool,
        /// Results CSV; rows are appended as variants finish.
        #[arg(long)]
        out: Option<String>,
    },
    /// Write a dataset's vertex series as CSV.
    ExportCsv {
        #[arg(long)]
        data: String,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<String>,
    },
}

/// Configuration layers shared by the subcommands that build runs.
#[derive(Args, Debug)]
struct CommonArgs {
    /// Bundled graph name (g4, g10) or graph file.
    #[arg(long)]
    graph: Option<String>,
    /// Parameter bundle applied below the config file and flags.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON config file; keys mirror the resolved configuration.
    #[arg(long)]
    config: Option<String>,
    /// Override any configuration key, e.g. `--set model.d_h=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden width of the vector-field networks.
    #[arg(long)]
    width: Option<usize>,
}

impl CommonArgs {
    fn layers(&self, mut flags: Vec<(String, Value)>) -> anyhow::Result<Layers> {
        if let Some(g) = &self.graph {
            flags.insert(0, ("graph".into(), Value::from(g.clone())));
        }
        // --set comes last so it can override dedicated flags too
        for raw in &self.set {
            flags.push(parse_assignment(raw)?);
        }
        Ok(Layers {
            preset: self.preset,
            file: self.config.clone(),
            overrides: flags,
        })
    }
}

impl TrainingArgs {
    fn flags(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        push(&mut out, "train.epochs", self.epochs);
        push(&mut out, "train.batch_size", self.batch_size);
        push(&mut out, "train.adam.lr", self.lr);
        push(&mut out, "model.hidden_width", self.width);
        out
    }
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), serde_json::to_value(v).expect("flag values serialise")));
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Inspect { graph, precision } => commands::inspect(&graph, precision),
        Command::Simulate {
            common,
            series,
            seed,
            sigma,
            steps,
            out,
        } => {
            let mut flags = Vec::new();
            push(&mut flags, "n_series", series);
            push(&mut flags, "simulation.seed", seed);
            push(&mut flags, "simulation.shift_per_step", sigma);
            push(&mut flags, "simulation.n_steps", steps);
            let cfg = config::resolve(&common.layers(flags)?)?;
            commands::simulate(&cfg, &out, &argv)
        }
        Command::Dataset { data, split_seed } => commands::dataset_summary(&data, split_seed),
        Command::Train {
            common,
            training,
            data,
            inner,
            outer,
            seed,
            resume,
            out,
        } => {
            let mut flags = training.flags();
            push(&mut flags, "inner", inner);
            push(&mut flags, "outer", outer);
            push(&mut flags, "train.seed", seed);
            let cfg = config::resolve(&common.layers(flags)?)?;
            commands::train(&cfg, data.as_deref(), resume.as_deref(), &out, &argv)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            latest,
        } => commands::eval(&checkpoint, &data, split, latest),
        Command::Grid {
            common,
            training,
            seeds,
            series,
            parallel,
            out,
        } => {
            let mut flags = training.flags();
            push(&mut flags, "seeds", seeds);
            push(&mut flags, "n_series", series);
            if parallel {
                push(&mut flags, "parallel", Some(true));
            }
            let cfg = config::resolve(&common.layers(flags)?)?;
            commands::grid(&cfg, out.as_deref(), &argv)
        }
        Command::ExportCsv { data, out } => commands::export_csv(&data, out.as_deref()),
    }
}

/// Maps the first recognised cause to an exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                e if e.is_numeric() => 4,
                CoreError::Io(_) => 1,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<AutodiffError>() {
            return match e {
                AutodiffError::NonFiniteGradient { .. } => 4,
                AutodiffError::Io(_) => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // explicit help and version requests are not errors
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed downstream pipe (`gncde export-csv ... | head`) is not a failure
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

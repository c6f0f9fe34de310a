//! `din` — generate synthetic benchmarks, train and evaluate the dynamic
//! interaction-graph models, analyze reasoning-module cost, and export
//! interaction graphs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{load_file_config, ModelFlags, Precision};

#[derive(Parser)]
#[command(
    name = "din",
    version,
    about = "Dynamic interaction-graph models over spatio-temporal feature grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonFlags {
    /// TOML config file; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary seed of the subcommand (generator seed for gen, training seed
    /// for train)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision
    #[arg(long, value_enum, global = true)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Gen {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        model: ModelFlags,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Displacement law: short | long
        #[arg(long)]
        task: Option<String>,
        /// Temporal steps T
        #[arg(long = "T")]
        frames: Option<usize>,
        /// Persons per frame N
        #[arg(long = "N")]
        persons: Option<usize>,
        /// Feature noise sigma
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model on a dataset file
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        model: ModelFlags,
        /// Training dataset (.din)
        #[arg(long)]
        dataset: PathBuf,
        /// Optional eval dataset for per-epoch metrics
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Training epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint (.din)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (.din)
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic parameter/FLOP table for the reasoning modules
    Analyze {
        #[command(flatten)]
        common: CommonFlags,
        /// Variant to analyze ("all" renders the reference table)
        #[command(flatten)]
        model: ModelFlags,
        /// Temporal steps T
        #[arg(long = "T", default_value_t = 10)]
        frames: usize,
        /// Persons per frame N
        #[arg(long = "N", default_value_t = 12)]
        persons: usize,
        /// Optional output directory for complexity.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export interaction graphs of one sample as CSV
    ExportGraphs {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint (.din)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (.din)
        #[arg(long)]
        dataset: PathBuf,
        /// Sample index inside the dataset
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            common,
            model,
            out,
            count,
            task,
            frames,
            persons,
            noise,
        } => {
            let file = load_file_config(common.config.as_deref())?;
            let resolved = config::resolve(
                &file,
                &model,
                task.as_deref(),
                frames,
                persons,
                noise,
                None,
                common.seed,
                common.precision,
                true,
            )?;
            commands::cmd_gen(&resolved, count, &out)
        }
        Command::Train {
            common,
            model,
            dataset,
            eval_dataset,
            out,
            epochs,
        } => {
            let file = load_file_config(common.config.as_deref())?;
            let resolved = config::resolve(
                &file,
                &model,
                None,
                None,
                None,
                None,
                epochs,
                common.seed,
                common.precision,
                false,
            )?;
            commands::cmd_train(&resolved, &dataset, eval_dataset.as_deref(), &out)
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            out,
        } => {
            let file = load_file_config(common.config.as_deref())?;
            let resolved = config::resolve(
                &file,
                &ModelFlags::default(),
                None,
                None,
                None,
                None,
                None,
                common.seed,
                common.precision,
                false,
            )?;
            commands::cmd_eval(&resolved, &checkpoint, &dataset, &out)
        }
        Command::Analyze {
            common,
            model,
            frames,
            persons,
            out,
        } => {
            let file = load_file_config(common.config.as_deref())?;
            let requested = model.variant.clone();
            let model = ModelFlags {
                // analyze defaults to the reference widths rather than the
                // desk-scale training widths; "all" is resolved inside
                // cmd_analyze, not by the variant parser
                variant: model.variant.filter(|v| v != "all"),
                embed_dim: model.embed_dim.or(Some(1024)),
                lite_dim: model.lite_dim.or(Some(128)),
                ..model
            };
            let resolved = config::resolve(
                &file,
                &model,
                None,
                None,
                None,
                None,
                None,
                common.seed,
                common.precision,
                false,
            )?;
            commands::cmd_analyze(&resolved, requested.as_deref(), frames, persons, out.as_deref())
        }
        Command::ExportGraphs {
            common,
            checkpoint,
            dataset,
            sample,
            out,
        } => {
            let file = load_file_config(common.config.as_deref())?;
            let resolved = config::resolve(
                &file,
                &ModelFlags::default(),
                None,
                None,
                None,
                None,
                None,
                common.seed,
                common.precision,
                false,
            )?;
            commands::cmd_export_graphs(&resolved, &checkpoint, &dataset, sample, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // one-line machine-parsable error: "error: <kind>: <detail>"
            let msg = err.to_string().replace('\n', " ");
            if let Some(core) = err.downcast_ref::<din_core::DinError>() {
                eprintln!("error: {}", error_kind_line(core));
            } else if msg.contains(':') {
                eprintln!("error: {msg}");
            } else {
                eprintln!("error: failure: {msg}");
            }
            ExitCode::FAILURE
        }
    }
}

fn error_kind_line(err: &din_core::DinError) -> String {
    use din_core::DinError::*;
    let kind = match err {
        ShapeMismatch { .. } | BadShape { .. } | AxisOutOfRange { .. } => "shape_error",
        InvalidField { .. } | InvalidConfig(_) | ConfigMismatch { .. } => "invalid_config",
        LabelOutOfRange { .. } => "invalid_label",
        NonScalarLoss { .. } => "non_scalar_loss",
        Diverged { .. } => "training_diverged",
        NothingToExport => "nothing_to_export",
        Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
        Io { .. } => "io_error",
        Format { .. } => "bad_format",
    };
    format!("{kind}: {}", err.to_string().replace('\n', " "))
}

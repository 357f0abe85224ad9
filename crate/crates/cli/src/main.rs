//! `frappe-kit`: train fairness-regularized scorers in-processing or as
//! additive post-hoc modules on a frozen base, sweep the accuracy/fairness
//! trade-off, and check the GLM equivalence between the two recipes.
//!
//! Every command reads one JSON config (`--config`), writes its artifacts
//! into one output directory, and finishes with a `manifest.json` that
//! echoes the config, lists the outputs, and records wall time. Exit codes:
//! 0 success, 2 configuration error, 3 numeric failure, 4 partial results,
//! 5 verification failure.

mod commands;
mod config;
mod outputs;
mod pipeline;

use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};
use thiserror::Error;

use frappe_core::data::DataError;
use frappe_core::glm::GlmError;
use frappe_core::metrics::MetricsError;
use frappe_core::model::ModelError;
use frappe_core::penalty::PenaltyError;
use frappe_core::train::TrainError;

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "FRAPPE_KIT_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config file, bad flag combination, missing section: exit 2.
    #[error("{0}")]
    Config(String),
    /// The numbers went wrong at runtime (divergence, singular solve): exit 3.
    #[error("{0}")]
    Numeric(String),
    /// Some sweep points failed; the survivors were still written: exit 4.
    #[error("{0}")]
    Partial(String),
    /// A verification report was produced but exceeds tolerance: exit 5.
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Partial(_) => 4,
            CliError::Verification(_) => 5,
        }
    }
}

fn penalty_is_config(e: &PenaltyError) -> bool {
    matches!(e, PenaltyError::InvalidSpec { .. })
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        // Model errors at the CLI surface mean the config pointed a model at
        // data it does not fit (dimension, missing score column).
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::InvalidConfig(_)
            | TrainError::InvalidFraction { .. }
            | TrainError::Data(_)
            | TrainError::Model(_) => CliError::Config(e.to_string()),
            TrainError::Penalty(p) if penalty_is_config(p) => CliError::Config(e.to_string()),
            TrainError::PenaltyAt { source, .. } if penalty_is_config(source) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<GlmError> for CliError {
    fn from(e: GlmError) -> Self {
        match &e {
            GlmError::Data(_) | GlmError::DimError { .. } | GlmError::NotBinary => {
                CliError::Config(e.to_string())
            }
            GlmError::Penalty(p) if penalty_is_config(p) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match &e {
            MetricsError::InvalidInput(_) | MetricsError::Model(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "frappe-kit",
    version,
    about = "Fairness post-processing toolkit: additive post-hoc modules, \
             trade-off sweeps, and GLM equivalence checks"
)]
struct Cli {
    /// Path to the JSON run config.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.directory` from the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed (overrides `train.seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sweeps (overrides the FRAPPE_KIT_WORKERS env var).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-group dataset and write it as CSV.
    Synth,
    /// Train an unregularized base scorer and save it as model.json.
    TrainBase,
    /// Train one model (in-processing or frappe) at a single lambda.
    Train,
    /// Run a lambda x seed sweep and write the trade-off table.
    Sweep,
    /// Score a dataset with a saved model and report metrics.
    Eval,
    /// Check the in-/post-processing equivalence for a GLM family.
    VerifyGlm,
    /// Correlate a post-hoc module's output with each feature, per group.
    AnalyzePosthoc,
    /// Score the keep-or-force-favorable randomized baseline over a p grid.
    BaselineNaive,
}

fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag {
        return Ok(w.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .map(|w| w.max(1))
            .map_err(|_| {
                CliError::Config(format!(
                    "{WORKERS_ENV} must be a non-negative integer, got {raw:?}"
                ))
            }),
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <FILE> is required".to_string()))?;
    let (mut config, config_value) = config::load_config(&config_path)?;
    if let Some(out) = cli.out {
        config.output.directory = out;
    }
    let master_seed = cli
        .seed
        .unwrap_or_else(|| config.train.as_ref().map_or(0, |t| t.seed));
    let workers = resolve_workers(cli.workers)?;
    std::fs::create_dir_all(&config.output.directory).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            config.output.directory.display()
        ))
    })?;
    let ctx = commands::Ctx {
        out_dir: config.output.directory.clone(),
        config,
        config_value,
        master_seed,
        workers,
    };
    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::TrainBase => commands::cmd_train_base(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::VerifyGlm => commands::cmd_verify_glm(&ctx),
        Command::AnalyzePosthoc => commands::cmd_analyze_posthoc(&ctx),
        Command::BaselineNaive => commands::cmd_baseline_naive(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}

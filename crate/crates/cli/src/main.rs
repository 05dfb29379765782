//! `longtail`: synthesize long-tailed datasets, train classifiers, and run
//! counterfactual evaluation, sweeps, diagnostics, and repro recipes.
//!
//! Exit codes: 0 success, 1 usage, 2 validation (bad config key or flag
//! combination), 3 runtime (missing/corrupt files, divergence). Every run is
//! deterministic given its seeds; no environment variables are consulted.

mod commands;
mod config;
mod recipes;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<longtail_core::Error> for CliError {
    fn from(e: longtail_core::Error) -> Self {
        use longtail_core::Error as E;
        match e {
            E::InvalidConfig(_) => CliError::Validation(e.to_string()),
            E::Parse { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "longtail", version, about = "Long-tailed classification with counterfactual inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a long-tailed dataset from a config file
    Synth {
        /// Config file (key = value)
        #[arg(long)]
        config: PathBuf,
        /// Sampling seed for the dataset
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset file
    Train {
        /// Config file (key = value)
        #[arg(long)]
        config: PathBuf,
        /// Input dataset file
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV (defaults to <out>.metrics.csv)
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file
        #[arg(long)]
        data: PathBuf,
        /// Inference mode: plain, tde, or tde_bg_exempt
        #[arg(long, default_value = "plain")]
        mode: String,
        /// Counterfactual trade-off; only meaningful for tde modes
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Dataset split to evaluate: test or val
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional split-report CSV to write
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-sample prediction CSV (sample, labels, probabilities)
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across an alpha grid
    Sweep {
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated strictly increasing alpha values
        #[arg(long, default_value = "0,0.5,1,1.5,2,2.5,3")]
        alphas: String,
        /// Dataset split to evaluate: val or test
        #[arg(long, default_value = "val")]
        split: String,
        /// Output sweep CSV
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Per-class diagnostics (feature norms, weight norms, head-direction cosines)
    Diag {
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file
        #[arg(long)]
        data: PathBuf,
        /// Output diagnostics CSV
        #[arg(long, default_value = "diag.csv")]
        out: PathBuf,
    },
    /// Run a named end-to-end recipe (alpha-sweep, method-comparison, four-regimes)
    Repro {
        /// Recipe name
        recipe: String,
        /// Output directory for all recipe artifacts
        #[arg(long)]
        outdir: PathBuf,
        /// Number of seeded repetitions to average over
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// First seed; repetitions use base_seed..base_seed+seeds
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, seed, out } => commands::synth(&config, seed, &out),
        Command::Train { config, data, out, metrics } => {
            commands::train(&config, &data, &out, metrics.as_deref())
        }
        Command::Eval { checkpoint, data, mode, alpha, split, out, predictions } => {
            commands::eval(&checkpoint, &data, &mode, alpha, &split, out.as_deref(), predictions.as_deref())
        }
        Command::Sweep { checkpoint, data, alphas, split, out } => {
            commands::sweep(&checkpoint, &data, &alphas, &split, &out)
        }
        Command::Diag { checkpoint, data, out } => commands::diag(&checkpoint, &data, &out),
        Command::Repro { recipe, outdir, seeds, base_seed } => {
            recipes::run(&recipe, &outdir, seeds, base_seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

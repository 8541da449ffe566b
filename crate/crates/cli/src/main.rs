use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use breg_core::data::{Split, Task};
use clap::{Parser, Subcommand};

mod commands;
mod config;

/// Train and evaluate bounded residual gradient networks.
#[derive(Debug, Parser)]
#[command(name = "breg", version)]
struct Cli {
    /// Worker threads. Computation is single-threaded, so every value gives
    /// identical results; 1 is the reproducibility mode.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences for every
    /// bypass function, layer, loss and a composed network.
    Gradcheck {
        /// Seed for the random check points.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train a network from a TOML run configuration.
    Train {
        /// Run configuration (network, training and data tables).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file, overriding data.path in the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the checkpoint, trace and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Run configuration (.toml), FER2013 CSV or manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON metric report.
        #[arg(long)]
        report: PathBuf,
        /// Split to score.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Skew-normalization trials for categorical metrics (0 disables).
        #[arg(long, default_value_t = breg_core::metrics::DEFAULT_SKEW_TRIALS)]
        skew_trials: usize,
        /// Seed for skew-normalization sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the prediction CSV here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Standardize each channel of CSV data with its own statistics.
        #[arg(long)]
        standardize: bool,
    },
    /// Compute metrics from a prediction CSV without a model.
    Metrics {
        /// Prediction CSV (`pred,gt` or
        /// `pred_valence,pred_arousal,gt_valence,gt_arousal`).
        #[arg(long)]
        pred: PathBuf,
        /// categorical or dimensional.
        #[arg(long)]
        task: Task,
        /// Skew-normalization trials for categorical metrics (0 disables).
        #[arg(long, default_value_t = breg_core::metrics::DEFAULT_SKEW_TRIALS)]
        skew_trials: usize,
        /// Seed for skew-normalization sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class count; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// A check or training run failed (exit 1).
    Verification(String),
    /// Bad arguments, configuration or incompatible inputs (exit 2).
    Usage(String),
    /// Unreadable or malformed files (exit 3).
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Verification(m) | CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<breg_core::Error> for CliError {
    fn from(e: breg_core::Error) -> Self {
        use breg_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) | E::Parse { .. } | E::Checkpoint(_) => CliError::Io(msg),
            E::Diverged { .. } | E::NonFinite { .. } => CliError::Verification(msg),
            E::Shape { .. } | E::Contract { .. } | E::UndefinedMetric { .. } | E::Config(_) => CliError::Usage(msg),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gradcheck { seed, tolerance } => commands::gradcheck(seed, tolerance),
        Command::Train { config, data, out } => commands::train(&config, data.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            skew_trials,
            seed,
            predictions,
            standardize,
        } => commands::eval(&commands::EvalArgs {
            ckpt,
            data,
            report,
            split,
            skew_trials,
            seed,
            predictions,
            standardize,
        }),
        Command::Metrics {
            pred,
            task,
            skew_trials,
            seed,
            classes,
            report,
        } => commands::metrics(&pred, task, skew_trials, seed, classes, report.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

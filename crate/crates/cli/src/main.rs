//! Command-line surface: dataset fetching, training runs, evaluation,
//! defense harnesses, baseline comparison, and plot emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training divergence, 5 I/O error, 1 anything else.

mod commands;
mod plots;
mod rundir;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "backscatter", version, about = "Controlled untargeted backdoor training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset into the local cache.
    FetchData {
        /// mnist | cifar10 | cifar100 | gtsrb
        dataset: String,
        /// Cache root (default: $BACKSCATTER_DATA_DIR or ./data)
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Train a model from an experiment config file.
    Train {
        /// Path to the TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Root directory for run outputs.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Override config-hash mismatch checks on resume.
        #[arg(long)]
        force: bool,
        /// Validate the config, build the models, run two optimization
        /// steps, and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint and emit its report.
    Eval {
        /// Run directory or checkpoint base path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// test | val
        #[arg(long, default_value = "test")]
        split: String,
        /// Validation-slice size when --split val.
        #[arg(long, default_value_t = 2000)]
        val_size: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output directory (default: the run's reports/ directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy-defense analysis of a checkpoint.
    Strip {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_overlays: usize,
        /// Samples drawn from each of the clean and triggered pools.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-pruning sweep against a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pruning rates, ascending.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        rates: Vec<f64>,
        /// Clean calibration samples for channel ranking.
        #[arg(long, default_value_t = 2000)]
        calibration: usize,
        /// Test samples for the per-rate metric evaluation.
        #[arg(long, default_value_t = 2000)]
        eval_samples: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-by-side dispersion comparison of two trained checkpoints.
    CompareBaseline {
        /// Run directory (or checkpoint base) of the dispersion-trained model.
        #[arg(long)]
        attack: PathBuf,
        /// Run directory (or checkpoint base) of the naive-loss baseline.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Render plots from a report or checkpoint.
    Plot {
        /// An evaluation-report JSON file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// A run directory or checkpoint base (for image plots).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Samples per figure.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn exit_code(e: &backscatter::Error) -> i32 {
    use backscatter::Error::*;
    match e {
        InvalidConfig(_) | InvalidSpec(_) | InvalidInput(_) | InvalidLabel { .. }
        | InvalidEncoding(_) | CheckpointMismatch(_) => 2,
        Data(_) => 3,
        Diverged { .. } => 4,
        Io(_) | Serde(_) => 5,
        UndefinedMetric(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FetchData { dataset, cache_dir } => commands::fetch_data(&dataset, cache_dir),
        Command::Train { config, out, resume, force, dry_run } => {
            commands::train(&config, &out, resume, force, dry_run)
        }
        Command::Eval { checkpoint, split, val_size, cache_dir, out } => {
            commands::eval(&checkpoint, &split, val_size, cache_dir, out)
        }
        Command::Strip { checkpoint, n_overlays, samples, cache_dir, out } => {
            commands::strip(&checkpoint, n_overlays, samples, cache_dir, out)
        }
        Command::Prune { checkpoint, rates, calibration, eval_samples, cache_dir, out } => {
            commands::prune(&checkpoint, rates, calibration, eval_samples, cache_dir, out)
        }
        Command::CompareBaseline { attack, baseline, cache_dir, out } => {
            commands::compare_baseline(&attack, &baseline, cache_dir, &out)
        }
        Command::Plot { report, checkpoint, samples, cache_dir, out } => {
            commands::plot(report, checkpoint, samples, cache_dir, &out)
        }
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

//! `codim`: dataset generation, pre-training, noisy-label training, CSSL,
//! standalone GMM partitioning and run reports.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 runtime error. Log
//! verbosity comes from `RUST_LOG`.

mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, TrainMode};

#[derive(Parser)]
#[command(name = "codim", version = run_dir::BUILD_ID, about = "Noisy-label and semi-supervised training on small datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset into the run directory.
    Gen { config: PathBuf },
    /// SelfCon pre-training; writes a checkpoint and the loss curve.
    Pretrain { config: PathBuf },
    /// Full noisy-label pipeline or the cross-entropy baseline.
    Train {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "sup")]
        mode: TrainMode,
    },
    /// Contrastive semi-supervised training on a labeled subset.
    Cssl {
        config: PathBuf,
        /// Fraction of training samples that keep their label; overrides the config.
        #[arg(long)]
        labeled_ratio: Option<f64>,
    },
    /// Two-component GMM split of a per-sample loss column.
    Partition {
        losses_csv: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the partition here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plots and a summary table for a finished run directory.
    Report { run_dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config } => commands::gen(&config),
        Command::Pretrain { config } => commands::pretrain(&config),
        Command::Train { config, mode } => commands::train(&config, mode),
        Command::Cssl { config, labeled_ratio } => commands::cssl(&config, labeled_ratio),
        Command::Partition {
            losses_csv,
            threshold,
            out,
        } => commands::partition(&losses_csv, threshold, out.as_deref()),
        Command::Report { run_dir } => commands::report(&run_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

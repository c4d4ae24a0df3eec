//! `saliency`: generate toy data, train, predict, explain, and evaluate.

mod commands;
mod dataset;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{evaluate, explain, gen_data, predict, train};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "saliency",
    version,
    about = "Saliency maps for multi-label image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blob dataset with ground-truth masks.
    GenData(gen_data::Args),
    /// Train the toy CNN on a dataset.
    Train(train::Args),
    /// Write class probabilities (and AUROC/AUPRC when labels exist).
    Predict(predict::Args),
    /// Produce heatmaps, previews and masks for each instance and class.
    Explain(explain::Args),
    /// Score heatmaps or masks against ground-truth masks.
    Evaluate(evaluate::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Predict(a) => predict::run(&a),
        Command::Explain(a) => explain::run(&a),
        Command::Evaluate(a) => evaluate::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs `f` in a pool of `workers` threads (0 = all cores).
pub(crate) fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    saliency::par::with_workers(workers, f)
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

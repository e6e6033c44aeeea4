//! `dyrex`: train, evaluate, gradient-check and ablate span-query heads.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dyrex_core::DyrexError;

use crate::config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "dyrex", version, about = "Dynamic span queries for extractive QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its log and checkpoint under output_dir.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Start from the parameters stored in this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides, `dotted.key=value`.
        overrides: Vec<String>,
    },
    /// Score a checkpoint on an MRQA file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run config to check the checkpoint against.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Directory for predictions.json and eval_report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Compare analytic gradients with finite differences on one example.
    Gradcheck {
        #[arg(short, long)]
        config: PathBuf,
        /// Index of the training example to check.
        #[arg(long, default_value_t = 0)]
        example: usize,
        overrides: Vec<String>,
    },
    /// Train every (layers, strategy, seed) cell and write ablation.csv.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Generate a synthetic key/value dataset in MRQA format.
    Synth {
        /// JSON synthetic spec; overrides may supply or replace fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the task vocabulary here.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        overrides: Vec<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<DyrexError>() {
            return match e {
                DyrexError::Format { .. }
                | DyrexError::Parse { .. }
                | DyrexError::TrainingData { .. }
                | DyrexError::GoldTruncated { .. }
                | DyrexError::InvalidInput(_)
                | DyrexError::Io { .. } => 2,
                DyrexError::NonFinite(_) | DyrexError::Numerical { .. } => 3,
                _ => 1,
            };
        }
        if cause.is::<commands::CheckFailed>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, resume, overrides } => commands::train(&config, resume.as_deref(), &overrides),
        Command::Eval { checkpoint, data, config, out, overrides } => {
            commands::eval(&checkpoint, &data, config.as_deref(), out.as_deref(), &overrides)
        }
        Command::Gradcheck { config, example, overrides } => commands::gradcheck(&config, example, &overrides),
        Command::Ablate { config, overrides } => commands::ablate(&config, &overrides),
        Command::Synth { spec, n, out, vocab_out, overrides } => {
            commands::synth(spec.as_deref(), n, &out, vocab_out.as_deref(), &overrides)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

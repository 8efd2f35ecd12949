mod chart;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// H-vmunet pipeline: preprocess slides, train, evaluate and summarize.
#[derive(Parser)]
#[command(name = "hvmunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract, filter, fuse, split into folds and augment
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Overrides pipeline.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on every fold except --fold
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Overrides train.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the held-out fold from a checkpoint or external predictions
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of <slide>_<row>_<col>_mask.png predictions
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Summarize all fold evaluations as mean ± std
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.pipeline.seed = s;
            }
            commands::preprocess(&cfg)?;
        }
        Command::Train { config, fold, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            commands::train(&cfg, fold)?;
        }
        Command::Eval {
            config,
            fold,
            checkpoint,
            predictions,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::eval(&cfg, fold, checkpoint.as_deref(), predictions.as_deref())?;
        }
        Command::Report { config } => {
            let cfg = RunConfig::load(&config)?;
            commands::report(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

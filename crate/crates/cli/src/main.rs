//! `promptclass` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.

mod commands;
mod config;
mod setup;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptclass::{Error, ErrorKind};

use crate::config::{Flags, UsageError};

#[derive(Debug, Parser)]
#[command(name = "promptclass", version, about = "Cloze-prompt code classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Learn a subword vocabulary from the training split.
    Vocab,
    /// Masked-token pretraining of the encoder.
    Pretrain,
    /// Train one variant over several seeds.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Compare variants over several seeds.
    Ablate,
    /// One row per start layer `s` in `0..=L`, using layers `s..L`.
    SweepLayers,
    /// Corpus size and length statistics.
    Stats,
    /// Per-layer attention weights of a checkpoint.
    AttentionReport,
    /// Parameter and multiply-accumulate counts.
    Profile,
    /// Wall-clock share of each pipeline stage.
    Time,
}

const THREADS_ENV: &str = "PROMPTCLASS_THREADS";

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| commands::run(&cli.command, &cli.flags));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

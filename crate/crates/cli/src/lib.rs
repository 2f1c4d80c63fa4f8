//! The `medvl` command line: ingest, corpus builders, inference, scoring
//! and table rendering, plus a resumable pipeline over all of them.

pub mod cli;
pub mod commands;
pub mod config;
pub mod logging;
pub mod pipeline;
pub mod report;

use thiserror::Error;

pub use cli::{Cli, Command};

/// How a command that did not fail outright ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Success,
    /// Completed, but some samples or jobs failed.
    Partial,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 1,
        }
    }

    pub fn partial_if(cond: bool) -> Self {
        if cond {
            Outcome::Partial
        } else {
            Outcome::Success
        }
    }
}

pub const EXIT_FATAL: u8 = 2;
/// Pipeline stage `i` failing exits with `EXIT_STAGE_BASE + i`.
pub const EXIT_STAGE_BASE: u8 = 10;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage {stage} failed: {source:#}")]
    Stage { stage: &'static str, index: u8, source: anyhow::Error },
    #[error("malformed metric file {path}: {message}")]
    Schema { path: String, message: String },
}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CliError>() {
        Some(CliError::Stage { index, .. }) => EXIT_STAGE_BASE + index,
        _ => EXIT_FATAL,
    }
}

pub async fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a.manifest, &a.out),
        Command::BuildAlign(a) => commands::build_align(&a, seed.unwrap_or(0)).await,
        Command::BuildSft(a) => commands::build_sft(&a, seed.unwrap_or(0)),
        Command::Infer(a) => commands::infer(&a).await,
        Command::Score(a) => commands::score(&a.predictions, &a.ground_truth, &a.out, a.spacing),
        Command::Report(a) => report::cmd_report(&a.metrics, &a.out),
        Command::Pipeline(a) => pipeline::run_pipeline(&a, seed).await,
    }
}

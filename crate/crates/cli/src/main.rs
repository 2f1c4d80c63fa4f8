use std::process::ExitCode;

use clap::Parser;
use medvl_cli::{exit_code, logging, run, Cli};

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init();
    match run(cli).await {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `bci`: command-line front end for the motor-imagery BCI engine.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 source error, 5 training divergence. Failures also print one JSON
//! line `{"error", "exit_code", "message"}` to stderr.

mod args;
mod commands;
mod config;
mod error;

use clap::Parser;
use std::process::ExitCode;

use args::Cli;
use commands::Ctx;
use config::Settings;
use error::{CliError, CliResult};

fn run(cli: Cli) -> CliResult {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = cli.seed.or(settings.seed).unwrap_or_else(bci_core::entropy_seed);
    settings.resolve_seeds(seed);
    eprintln!("seed: {seed}");
    eprintln!(
        "config: {}",
        serde_json::to_string(&settings).expect("settings serialize to JSON")
    );
    commands::run(&Ctx { settings, seed }, cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(), // --help, --version
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", CliError::Usage(e.kind().to_string()).json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use drlab::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli).with_context(|| format!("drlab {name} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<drlab::Error>().map_or(1, exit_code))
        }
    }
}

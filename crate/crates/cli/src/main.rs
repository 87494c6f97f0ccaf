//! `tvcomb` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a domain error (a JSON object with `kind`,
//! `message` and `location` is written to stderr), 2 on a usage error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use crate::config::Cli;

pub enum CliError {
    Usage(String),
    Domain(tvcomb::Error),
}

impl From<tvcomb::Error> for CliError {
    fn from(e: tvcomb::Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0; the rest exits 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            let report = serde_json::json!({
                "kind": e.kind(),
                "message": e.to_string(),
                "location": e.location(),
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}

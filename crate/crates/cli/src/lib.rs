//! The `dvote` operator CLI: seeded election runs, dispute drills, training
//! audits and gas estimates. Every output byte is a function of the inputs
//! and seed unless the fixed clock is turned off.

pub mod args;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use serde::Serialize;

pub use args::{Cli, Command};

/// Exit codes: 0 success, 1 invariant violation, 2 usage or config error.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid {what}: {message}")]
    Config { what: String, message: String },
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Read { .. } => "read",
            CliError::Write { .. } => "write",
            CliError::Config { .. } => "config",
            CliError::Invariant(_) => "invariant",
        }
    }

    /// One-line JSON diagnostic for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct E<'a> {
            error: &'a str,
            message: String,
        }
        serde_json::to_string(&E {
            error: self.kind(),
            message: self.to_string(),
        })
        .expect("serializes")
    }
}

/// Runs a parsed command line, returning the text to print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    commands::dispatch(cli)
}

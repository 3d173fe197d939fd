//! Scenario runner behind the `stacksim` binary.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod report;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {origin}: {msg}")]
    Parse { origin: String, msg: String },
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("correctness failure: {0}")]
    Correctness(String),
}

impl CliError {
    /// 1 for I/O and parsing, 2 for validation and feasibility, 3 for
    /// correctness failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Parse { .. } => 1,
            CliError::Invalid { .. } => 2,
            CliError::Correctness(_) => 3,
        }
    }

    pub(crate) fn invalid(field: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Invalid {
            field: field.to_string(),
            msg: msg.to_string(),
        }
    }
}

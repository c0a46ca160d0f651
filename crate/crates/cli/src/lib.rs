//! Batch front-end for `regnorm`: JSON norm specs in, values, surrogates,
//! certification reports and mirror-descent traces out.

pub mod commands;
pub mod spec;

use std::fmt;

pub use commands::{run, Cli};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Malformed input or a violated precondition (exit 1).
    Validation(String),
    /// A numerical routine failed to converge (exit 2).
    Numerical(String),
    /// A certification or cross-check inequality failed (exit 3).
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
            CliError::CheckFailed(m) => CliError::CheckFailed(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<regnorm::Error> for CliError {
    fn from(e: regnorm::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

//! Command failures and their exit codes.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// The configuration is unreadable or violates the schema (exit code 2).
    Config(String),
    /// A stage failed, an input is missing or a stored hash does not match (exit code 1).
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => write!(f, "stage error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<blemish_core::Error> for CliError {
    fn from(e: blemish_core::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

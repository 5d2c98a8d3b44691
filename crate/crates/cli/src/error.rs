use std::path::PathBuf;

use bilevel_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, reported with the offending field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} check(s) failed: {}", .0.len(), .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => exit::CONFIG,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Output { .. } => exit::IO,
            CliError::Core(e) => {
                let root = e.root();
                if root.is_numerical() {
                    exit::NUMERICAL
                } else if matches!(root, CoreError::Io { .. } | CoreError::Parse { .. }) {
                    exit::IO
                } else {
                    exit::CONFIG
                }
            }
        }
    }
}

/// Attaches a field path to core validation errors raised while building
/// objects from one config section.
pub(crate) fn at(path: &'static str) -> impl Fn(CoreError) -> CliError {
    move |e| match e {
        CoreError::Config(message) => CliError::config(path, message),
        CoreError::InfeasiblePlan(message) => CliError::config(path, format!("infeasible split plan: {message}")),
        other => CliError::Core(other),
    }
}

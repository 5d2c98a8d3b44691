use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numerical breakdown at iteration {iteration}: {reason}")]
    NumericalBreakdown { iteration: usize, reason: String },

    #[error("fixed-point iteration diverged at iteration {iteration} (residual {residual:e})")]
    Divergence { iteration: usize, residual: f64 },

    #[error("matrix is singular (pivot {pivot:e} below threshold {threshold:e})")]
    Singular { pivot: f64, threshold: f64 },

    #[error("non-finite value at inner step {step}: {what}")]
    NonFinite { step: usize, what: &'static str },

    #[error("step size {alpha} exceeds 2/L = {limit}; inner map is not contractive")]
    NonContractive { alpha: f64, limit: f64 },

    #[error("infeasible split plan: {0}")]
    InfeasiblePlan(String),

    #[error("enumeration too large: {count} partitions exceed the limit of {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("outer step {step}: {source}")]
    AtOuterStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// The innermost error, looking through outer-step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtOuterStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether the failure is numerical rather than a usage mistake.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NumericalBreakdown { .. }
                | Error::Divergence { .. }
                | Error::Singular { .. }
                | Error::NonFinite { .. }
                | Error::NonContractive { .. }
        )
    }
}

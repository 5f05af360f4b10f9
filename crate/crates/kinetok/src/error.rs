//! Error type shared across the crate.
//!
//! Variants map one-to-one onto the CLI exit codes in the pipeline stage
//! runner, so every failure mode surfaces with a stable, scriptable code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Time grid is not strictly increasing or contains non-finite knots.
    #[error("time grid must be strictly increasing and finite: {0}")]
    GridOrder(String),

    /// Fewer observations than the operation requires.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Mismatched dimensions between related inputs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value landed outside its valid domain.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Degenerate statistics (zero variance, empty sample) where a spread is required.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// Invalid configuration (bad field values, impossible stage wiring).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input that failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally valid input that violates a data contract (negative price, bad date order).
    #[error("data error: {0}")]
    Data(String),

    /// An operation would have read information from beyond the training boundary.
    #[error("leakage guard: {0}")]
    Leakage(String),

    /// Numerical breakdown: singular system, non-finite intermediate, failed residual gate.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A required upstream artifact is missing or stale.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } => 3,
            Error::GridOrder(_)
            | Error::InsufficientData(_)
            | Error::Shape(_)
            | Error::OutOfRange(_)
            | Error::DegenerateStats(_)
            | Error::Data(_) => 4,
            Error::Leakage(_) => 5,
            Error::NumericalFailure(_) => 6,
            Error::Dependency(_) => 7,
            Error::Io(_) => 1,
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CointexecError {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        field: &'static str,
        expected: String,
        actual: String,
    },

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error("Riccati solution blew up at t = {time:.6} ({detail})")]
    BlowUp { time: f64, detail: String },

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("time {t} outside the solved horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("estimation failure: {0}")]
    Estimation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("CSV failure: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CointexecError>;

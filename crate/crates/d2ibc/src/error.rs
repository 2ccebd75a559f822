//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-invertible reference model: {0}")]
    NonInvertible(String),

    #[error("degenerate normalization: {0}")]
    DegenerateNormalization(String),

    #[error("instability: output exceeded {guard} at t={t}")]
    Instability { guard: f64, t: i64 },

    #[error("assumption violation: {0}")]
    AssumptionViolation(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("signal error: {0}")]
    Signal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid degree {degree} for {num_npus} NPUs (must be 1..={max})")]
    InvalidDegree {
        degree: usize,
        num_npus: usize,
        max: usize,
    },

    #[error("invalid discretization factor {0} (must be > 0)")]
    InvalidFactor(f64),

    #[error("invalid horizon: must be >= 1")]
    InvalidHorizon,

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("chunk {chunk} cannot reach NPU {npu}: no path from any holder")]
    UnreachableDestination { chunk: usize, npu: usize },

    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("synthesis stalled: {0}")]
    Stall(String),

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("unsupported schedule version {0}")]
    UnsupportedVersion(u64),

    #[error("solution parse error at line {line}: {message}")]
    SolutionParse { line: usize, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

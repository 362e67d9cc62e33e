//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("graph connectivity error: node {node} is isolated")]
    IsolatedNode { node: usize },

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("robust fit failure: {0}")]
    RobustFit(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error at iteration {iter}: {msg}")]
    Training { iter: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

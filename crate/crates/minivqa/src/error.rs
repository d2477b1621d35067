//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; carries both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config: {0}")]
    Config(String),
    /// A softmax/loss row with every entry masked out.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("sequence length {len} exceeds limit {limit}")]
    Length { len: usize, limit: usize },
    #[error("adapter variant: {0}")]
    Variant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reference: {0}")]
    Reference(String),
    #[error("format: {0}")]
    Format(String),
    #[error("input: {0}")]
    Input(String),
    #[error("training: {0}")]
    Training(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

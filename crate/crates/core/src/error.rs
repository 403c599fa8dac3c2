use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("index {index} out of range (len {len}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("sequence length {len} outside [1, {max}]")]
    Length { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("not enough data: {0}")]
    Size(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("audit failed for {method}: {details}")]
    Audit { method: String, details: String },

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

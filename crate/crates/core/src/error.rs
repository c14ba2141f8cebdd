use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("input of length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("empty tokenization for {0:?}")]
    EmptyTokenization(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("index format error: {0}")]
    IndexFormat(String),

    #[error("chat transport error: {0}")]
    Transport(String),

    #[error("empty completion")]
    EmptyCompletion,

    #[error("judge parse error: {message} (raw: {raw:?})")]
    JudgeParse { message: String, raw: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

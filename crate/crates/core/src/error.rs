use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("{count} topic subsets exceed the enumeration cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: usize },

    #[error("non-finite attention scores in column {column}")]
    NonFiniteScores { column: usize },

    #[error("non-finite loss at step {step} (last finite loss: {last_finite:?})")]
    NonFiniteLoss { step: usize, last_finite: Option<f64> },

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error in {source_name} line {line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

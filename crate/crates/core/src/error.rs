use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hex parse error at index {index}: {reason}")]
    HexParse { index: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{kind}: parameter {value} outside [{lo}, {hi}]")]
    AttackRange {
        kind: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

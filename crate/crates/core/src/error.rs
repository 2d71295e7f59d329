use std::io;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum RtcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RtcError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> RtcError {
    RtcError::InvalidInput(msg.into())
}

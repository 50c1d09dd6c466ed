use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed weight file: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("token {token} has no KV at layer {layer} (frontier {frontier})")]
    MissingKv {
        layer: usize,
        token: usize,
        frontier: usize,
    },

    #[error("no aux entry for token {token} at layer {layer}")]
    MissingAux { layer: usize, token: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}

use std::io;

use thiserror::Error;

pub type Result<T, E = LfsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LfsError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("gradient contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl LfsError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        LfsError::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

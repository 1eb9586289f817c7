use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, out-of-range indices, malformed labels.
    #[error("argument error: {0}")]
    Argument(String),

    /// Non-finite values or undefined quantities (zero-norm cosine).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corpus or sample preconditions not met.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Loss went non-finite during optimisation.
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed checkpoint or clip file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Training { .. } => 3,
            Error::Numeric(_) | Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

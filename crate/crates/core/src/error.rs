use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// An operation was called out of order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte {offset} ({section}): {message}")]
    Format {
        offset: u64,
        section: &'static str,
        message: String,
    },

    #[error("training diverged at step {step} (last good step {last_good}): {message}")]
    Training {
        step: usize,
        last_good: usize,
        message: String,
    },

    /// Bad configuration text or value; `line` is 1-based when known.
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::NumericDomain(msg.into())
    }
}

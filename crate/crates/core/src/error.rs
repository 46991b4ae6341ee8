use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, axes or parameter values that cannot be used together.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Mathematically undefined request, e.g. moments of an empty slice.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was called before the state it needs exists.
    #[error("invalid state: {0}")]
    State(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}")]
    Divergence { epoch: usize, iteration: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

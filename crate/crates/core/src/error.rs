use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}`, expected one of: {valid}")]
    Unknown {
        kind: &'static str,
        name: String,
        valid: String,
    },

    /// A malformed file. `offset` is the byte position where parsing failed.
    #[error("{}: {message} (byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch} (epsilon={epsilon}, kappa={kappa})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        epsilon: f64,
        kappa: f64,
        value: f64,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

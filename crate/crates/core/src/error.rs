use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 4],
        rhs: [usize; 4],
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    // The cause is part of the message, so it is not also exposed as a
    // source; error reporters would otherwise print it twice.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            inner: Box::new(self),
        }
    }

    /// True for errors caused by the filesystem or malformed files rather
    /// than by invalid inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Format { .. } => true,
            Error::Context { inner, .. } => inner.is_io(),
            _ => false,
        }
    }
}

pub(crate) fn check_shape(op: &'static str, lhs: [usize; 4], rhs: [usize; 4]) -> Result<()> {
    if lhs == rhs {
        Ok(())
    } else {
        Err(Error::Shape { op, lhs, rhs })
    }
}

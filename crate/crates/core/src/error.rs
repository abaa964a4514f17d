use std::io;

use thiserror::Error;

/// Every failure mode surfaced by the library.
///
/// The CLI maps each variant onto its own exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("unknown key: {0}")]
    Lookup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("slide has no tiles: {0}")]
    EmptySlide(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("internal consistency violation: {0}")]
    Consistency(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the `pathvl` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::InvalidArgument(_) => 3,
            Error::Shape(_) => 4,
            Error::Numerical(_) => 5,
            Error::Format(_) => 6,
            Error::Corruption(_) => 7,
            Error::Lookup(_) => 8,
            Error::Config(_) => 9,
            Error::EmptySlide(_) => 10,
            Error::UndefinedMetric(_) => 11,
            Error::Training { .. } => 12,
            Error::Consistency(_) => 13,
            Error::Io { .. } => 14,
            Error::Json(_) => 15,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

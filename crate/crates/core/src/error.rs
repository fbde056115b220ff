use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its admissible domain.
    #[error("{0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Input is well-formed but cannot be processed (e.g. a constant path).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("input too short: length {length} < minimum {minimum}")]
    TooShort { length: usize, minimum: usize },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Short machine-parsable class name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::TooShort { .. } => "too_short",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }
}

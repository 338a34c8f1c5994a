use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid label {label} (expected 1..={classes})")]
    Label { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no queries to evaluate")]
    NoQueries,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short stable tag for machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::UnknownKey(_) => "unknown_key",
            Error::Dimension { .. } => "dimension",
            Error::DegenerateBox(_) => "degenerate_box",
            Error::Label { .. } => "label",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::NoQueries => "no_queries",
            Error::Io { .. } => "io",
            Error::Data { .. } => "data",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid volume file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("expected a 3D volume in {path}, got {ndim} dimensions")]
    Dimensionality { path: PathBuf, ndim: usize },

    #[error("inconsistent case: {0}")]
    Consistency(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),

    #[error("degenerate intensity range: lo={lo}, hi={hi}")]
    DegenerateRange { lo: f64, hi: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid phantom parameters: {0}")]
    Phantom(String),

    #[error("unavailable dependency: {0}")]
    Dependency(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: u64, terms: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Dimensionality { .. } => "dimensionality",
            Error::Consistency(_) => "consistency",
            Error::MissingInput(_) => "missing-input",
            Error::DegenerateHistogram(_) => "degenerate-histogram",
            Error::DegenerateRange { .. } => "degenerate-range",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Phantom(_) => "phantom",
            Error::Dependency(_) => "dependency",
            Error::EmptyRegion(_) => "empty-region",
            Error::NonFinite { .. } => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
        }
    }
}

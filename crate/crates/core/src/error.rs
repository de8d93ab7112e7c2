use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    EmptyInput(String),

    #[error("{0}")]
    Identifiability(String),

    #[error("zero vector for key `{0}`")]
    ZeroVector(String),

    #[error("duplicate key `{0}`")]
    DuplicateKey(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("{path}: byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parsable category used on the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty-input",
            Error::Identifiability(_) => "identifiability",
            Error::ZeroVector(_) => "zero-vector",
            Error::DuplicateKey(_) => "duplicate-key",
            Error::UnknownKey(_) => "unknown-key",
            Error::Parse { .. } | Error::Manifest { .. } | Error::Json(_) => "parse",
            Error::Format(_) => "format",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

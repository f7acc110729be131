use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or settings in a model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: wrong shapes handed to an operation, missing arguments.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Failures while reading persisted embeddings, sequences, matrices and token maps.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: bad magic bytes {found:?}, expected \"CSTE\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload, header promises {expected} bytes but {found} are present")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("{path}: duplicate item id {id:?}")]
    DuplicateId { path: PathBuf, id: String },

    #[error("{path}: id sidecar has {found} lines, matrix has {expected} rows")]
    IdCount { path: PathBuf, expected: usize, found: usize },

    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },

    #[error("{path}: dimension mismatch, expected {expected}, found {found}")]
    Dimension { path: PathBuf, expected: usize, found: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Load(_) | Error::Data(_) | Error::MissingArtifact { .. } | Error::Io { .. } | Error::Json { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

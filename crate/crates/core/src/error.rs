use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("checksum mismatch for step {step}: manifest has {expected}, blob hashes to {found}")]
    Checksum {
        step: u64,
        expected: String,
        found: String,
    },

    #[error("non-finite value in step {step}: key `{key}` at element {offset}")]
    NonFinite { step: u64, key: String, offset: usize },

    #[error("step {0} is not in the manifest")]
    StepNotFound(u64),

    #[error("steps {from} and {to} are not adjacent in the manifest")]
    NotAdjacent { from: u64, to: u64 },

    #[error("inconsistent key sets across checkpoints: {0}")]
    KeyMismatch(String),

    #[error("duplicate key `{0}` after prefix stripping")]
    DuplicateKey(String),

    #[error("invalid key pattern: {0}")]
    Pattern(#[from] regex::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("window [{start}, {start}+{len}) exceeds {n} available deltas")]
    WindowRange { start: usize, len: usize, n: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigenvalue {value:e} is below the clamp tolerance {tolerance:e}")]
    NegativeEigenvalue { value: f64, tolerance: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(
        "sketch store at {path} was built with fingerprint {existing}, requested {requested}; \
         pass an explicit overwrite to replace it"
    )]
    FingerprintMismatch {
        path: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

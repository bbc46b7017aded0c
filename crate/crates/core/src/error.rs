use std::path::PathBuf;

use thiserror::Error;

/// Failures reading or writing the binary volume and checkpoint formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unrecognized format: expected magic {expected:?}, found {found:?}")]
    UnrecognizedFormat { expected: String, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {bytes} bytes is not a whole number of {unit}-byte values")]
    TruncatedPayload { bytes: usize, unit: usize },
    #[error("payload size mismatch: header implies {expected} values, payload holds {actual}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infeasible seeding: could not place {n} seeds with exclusion radius {delta:.4} voxels")]
    Infeasible { n: usize, delta: f64 },
    #[error("no grains")]
    NoGrains,
    #[error("index {index} out of range for extent {extent}")]
    OutOfRange { index: usize, extent: usize },
    #[error("numerical divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },

    #[error("malformed {what} at byte {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for tensor of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("anomaly spectrum with spectral angle > {contrast} rad not found after {attempts} draws")]
    ContrastUnsatisfiable { contrast: f64, attempts: usize },

    #[error("single-class ground truth")]
    SingleClass,

    #[error("covariance is not positive definite (pivot {pivot}); increase the ridge")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("SNPR undefined: both threshold areas are zero")]
    SnprUndefined,

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// `ShapeMismatch`, `NonFinite` and `InvalidArgument` are contract
/// violations; `Precondition` is a refused-but-valid request.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("training diverged at {stage} step {step}: {detail}")]
    Diverged {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("malformed dataset at {path}: missing {missing}")]
    MissingComponent { path: PathBuf, missing: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// True for errors that indicate a caller broke an operation contract.
    pub fn is_contract_violation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. } | Error::NonFinite(_) | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

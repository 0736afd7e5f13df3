//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not conform to an op's shape rule.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an op's documented domain (e.g. log of a non-positive
    /// value after the clamp floor).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Invalid configuration or sample data rejected before any computation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Training aborted because the loss became non-finite.
    #[error("divergence: non-finite loss at {0}")]
    Divergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Container-format failures, each distinguishable by message:
    /// bad magic, unsupported version, truncation, checksum mismatch.
    #[error("file format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn validation(detail: impl Into<String>) -> Self {
        Error::Validation(detail.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// CLI exit code classification: 2 for validation/format problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) | Error::Domain { .. } => 3,
            _ => 2,
        }
    }
}

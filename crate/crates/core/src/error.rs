// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every featrace module.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unsupported version, truncated payload and similar.
    #[error("format error: {0}")]
    Format(String),

    /// Row counts that should line up across snapshots do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Statistic undefined on the given data (zero variance, all-zero rows).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}; last good checkpoint: {last_checkpoint:?}")]
    Divergence {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("http error: {0}")]
    Http(String),

    /// Unparseable annotator response; the raw body is kept for inspection.
    #[error("could not parse response: {message}")]
    Parse { message: String, raw: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from what the caller supplied (files, flags,
    /// data) rather than from a failure inside the computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::Alignment(_)
                | Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::Json(_)
                | Error::Degenerate(_)
        )
    }
}

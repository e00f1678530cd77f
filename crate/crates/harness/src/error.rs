use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] mutualnet::Error),

    #[error("dataset not found at {path}: {hint}")]
    DatasetMissing { path: PathBuf, hint: String },

    #[error("{artifact} was produced by config {found}, expected {expected}; rerun the producing step or point at the matching run directory")]
    HashMismatch {
        artifact: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("download of {url} failed: {detail}")]
    Download { url: String, detail: String },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lofit_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// Process exit code: 3 for numerical failure, 2 for everything a user
    /// can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(lofit_core::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

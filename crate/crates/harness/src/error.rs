use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] fedlm_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, reason: impl ToString) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    /// Whether the failure happened before any computation started.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Parse { .. } | Self::Core(fedlm_core::Error::Config(_) | fedlm_core::Error::Lookup { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

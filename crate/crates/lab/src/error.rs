use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Core(#[from] rwre_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown plot kind `{0}`")]
    UnknownKind(String),
}

impl LabError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether this is a validation failure (as opposed to a runtime one).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::Config { .. } | LabError::Core(rwre_core::Error::InvalidSpec { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

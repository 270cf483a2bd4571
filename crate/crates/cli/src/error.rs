use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] multinpe_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing {what}: {path} (run `{stage}` first)")]
    Missing { what: &'static str, path: PathBuf, stage: &'static str },

    #[error("{0} holds results for a different configuration; pass --force to replace them")]
    ConfigConflict(PathBuf),

    #[error("no results to report in {0}")]
    EmptyResults(PathBuf),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// Stable identifier used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "engine",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
            Self::Config(_) => "config",
            Self::Missing { .. } => "missing_artifact",
            Self::ConfigConflict(_) => "config_conflict",
            Self::EmptyResults(_) => "empty_results",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

pub(crate) fn config_error(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {term} at iteration {iteration} (seed {seed})")]
    Numeric { iteration: u64, seed: u64, term: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] abd_core::CoreError),
    #[error(transparent)]
    Nn(abd_nn::NnError),
}

impl From<abd_nn::NnError> for TrainError {
    fn from(e: abd_nn::NnError) -> Self {
        match e {
            abd_nn::NnError::Config(m) => TrainError::Config(m),
            other => TrainError::Nn(other),
        }
    }
}

impl TrainError {
    /// Process exit status for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) | TrainError::Core(abd_core::CoreError::Config(_)) => 2,
            TrainError::Numeric { .. }
            | TrainError::Nn(abd_nn::NnError::NonFinite { .. })
            | TrainError::Core(abd_core::CoreError::Numeric(_)) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Json { path, source }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

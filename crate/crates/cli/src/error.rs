use std::path::Path;

use thiserror::Error;
use umrm_core::{CheckpointError, Error as CoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2: validation failure, 3: numerical abort, 4: I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) | CliError::Report(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. } | CoreError::NonFiniteGradient(_) => 3,
                CoreError::Io(_) | CoreError::Checkpoint(CheckpointError::Io(_)) => 4,
                _ => 2,
            },
        }
    }
}

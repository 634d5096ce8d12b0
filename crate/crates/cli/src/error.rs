use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] robust_precoder::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("no slot succeeded: {0}")]
    AllSlotsFailed(String),
}

/// Machine-readable failure written next to the outputs.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad configuration, 3 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Manifest(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::AllSlotsFailed(_) => 3,
            CliError::Core(
                robust_precoder::Error::InvalidConfig(_)
                | robust_precoder::Error::InvalidProfile(_)
                | robust_precoder::Error::PilotCapacity { .. },
            ) => 2,
            _ => 1,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let kind = match self.exit_code() {
            2 => "config",
            3 => "numerical",
            _ => "io",
        };
        ErrorRecord {
            kind,
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

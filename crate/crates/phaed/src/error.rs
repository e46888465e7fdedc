use std::path::PathBuf;

use thiserror::Error;

/// Command failure, classified by the exit status it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<phaed_core::Error> for CliError {
    fn from(e: phaed_core::Error) -> Self {
        match e {
            phaed_core::Error::Config(m) => CliError::Config(m),
            e => CliError::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

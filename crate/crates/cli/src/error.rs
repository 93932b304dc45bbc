use std::path::{Path, PathBuf};

use advdenoise_core::Error;
use thiserror::Error;

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PREREQUISITE: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad input: {0}")]
    Data(String),
    #[error(transparent)]
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Prerequisite(_) => exit::PREREQUISITE,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Io { .. } | CliError::Data(_) => exit::IO,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => exit::CONFIG,
                Error::NonFinite(_) => exit::NUMERIC,
                Error::Checkpoint(_) => exit::PREREQUISITE,
                Error::Image(_) | Error::Io { .. } | Error::Csv(_) | Error::Malformed { .. } => exit::IO,
            },
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Config(msg),
            Error::NonFinite(msg) => CliError::Numeric(msg),
            other => CliError::Core(other),
        }
    }
}

use std::path::PathBuf;

use split_hmc::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Divergence(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0}")]
    Format(String),
}

impl CliError {
    /// Process exit status: 2 for bad configs or inputs, 3 when the only
    /// failure is divergence, 4 for file-system errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Format(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Divergence { .. } => 3,
                CoreError::Io(_) | CoreError::Csv(_) => 4,
                _ => 2,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Core(CoreError::Csv(e))
        } else {
            CliError::Format(e.to_string())
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

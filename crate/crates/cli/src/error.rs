use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("config error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dualcontrast::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data and filesystem problems,
    /// 4 for a numeric abort during training.
    pub fn exit_code(&self) -> i32 {
        use dualcontrast::Error as E;
        match self {
            CliError::Config(_) | CliError::Parse { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::NonFinite { .. } => 4,
                _ => 3,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

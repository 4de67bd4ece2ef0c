use std::path::{Path, PathBuf};

/// Errors raised by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("{}: row {row}: {reason}", path.display())]
    BadRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{}: {reason}", path.display())]
    BadFile { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fermech_core::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn bad_row(path: &Path, row: usize, reason: impl Into<String>) -> Self {
        CliError::BadRow {
            path: path.to_path_buf(),
            row,
            reason: reason.into(),
        }
    }

    pub fn bad_file(path: &Path, reason: impl Into<String>) -> Self {
        CliError::BadFile {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use fermech_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::BadRow { .. } | CliError::BadFile { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Config { .. } => 1,
                E::NonFiniteGradient { .. } | E::NonFiniteLoss { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

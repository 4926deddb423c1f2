use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("{} already exists and is not empty; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] recticast_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 configuration, 3 missing prerequisite, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use recticast_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Exists(_) | CliError::Parse { .. } => 2,
            CliError::Missing(_) => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Load { .. } | E::Precondition(_) => 3,
                E::Numeric(_) => 4,
                _ => 1,
            },
        }
    }
}

use std::path::{Path, PathBuf};

pub type Result<T, E = ToolError> = std::result::Result<T, E>;

/// Failure categories; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl ToolError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Checkpoint(_) => 4,
            Self::Numerical(_) => 5,
            Self::Io { .. } | Self::Other(_) => 1,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io { path: path.to_path_buf(), source }
    }
}

impl From<hypermod::Error> for ToolError {
    fn from(e: hypermod::Error) -> Self {
        match e {
            hypermod::Error::Config(m) => Self::Config(m),
            hypermod::Error::Dataset(m) => Self::Data(m),
            hypermod::Error::Divergence(m) => Self::Numerical(m),
            other => Self::Other(other.to_string()),
        }
    }
}

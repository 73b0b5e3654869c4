use std::path::PathBuf;

use rflow_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad file format: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("missing prerequisite: {0} does not exist")]
    Missing(PathBuf),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Io { .. } | LabError::Format { .. } => 3,
            LabError::Missing(_) => 4,
            LabError::Mismatch(_) => 5,
            LabError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Dimension(_) | CoreError::Alignment(_) | CoreError::Capacity { .. } => 5,
                _ => 1,
            },
        }
    }
}

use std::path::PathBuf;

/// Errors from the runner. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {kind} file {path}: {reason}")]
    Format { kind: &'static str, path: PathBuf, reason: String },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },
    #[error("{failed} theory check(s) failed")]
    ChecksFailed { failed: usize },
    #[error(transparent)]
    Core(#[from] cmlab_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LabError::Format { kind, path: path.into(), reason: reason.into() }
    }

    /// 2 for unusable inputs, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Checkpoint(_) | LabError::Format { .. } => 2,
            LabError::Io { .. } => 2,
            LabError::Diverged { .. } => 3,
            LabError::ChecksFailed { .. } => 1,
            LabError::Core(cmlab_core::Error::Training { .. }) => 3,
            LabError::Core(cmlab_core::Error::Input(_)) => 2,
            LabError::Core(_) => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

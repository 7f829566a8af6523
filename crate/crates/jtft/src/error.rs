use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the `jtft` tools, partitioned by process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Io { .. } => 1,
            AppError::Data(_) => 2,
            AppError::Divergence(_) => 3,
            AppError::Gradcheck(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }
}

impl From<jtft_core::Error> for AppError {
    fn from(e: jtft_core::Error) -> Self {
        use jtft_core::Error as E;
        match e {
            E::Data(m) => AppError::Data(m),
            E::Divergence(m) => AppError::Divergence(m),
            E::InvalidCheck(m) => AppError::Gradcheck(m),
            other => AppError::Config(other.to_string()),
        }
    }
}

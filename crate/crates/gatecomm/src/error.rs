use std::path::{Path, PathBuf};

/// Errors surfaced by the command line and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] gatecomm_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} gradient check(s) out of tolerance")]
    GradientCheck(usize),
}

impl AppError {
    /// 1 for usage errors, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
        move |source| AppError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn checkpoint(path: &Path, message: impl Into<String>) -> AppError {
        AppError::Checkpoint { path: path.to_path_buf(), message: message.into() }
    }
}

pub type AppResult<T> = Result<T, AppError>;

use std::path::{Path, PathBuf};

use digress_core::Error as CoreError;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    /// A required input file is missing or unreadable.
    #[error("cannot read {}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    /// A file exists but its contents are malformed.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
    #[error("[{stage}] {source}")]
    Stage { stage: &'static str, source: CoreError },
}

impl AppError {
    /// 2 usage, 3 validation, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Input { .. } => 2,
            AppError::Config(_) | AppError::Format { .. } => 3,
            AppError::Stage { source, .. } => match source {
                CoreError::Validation(_) | CoreError::OutOfRange { .. } => 3,
                _ => 4,
            },
            AppError::Output { .. } => 4,
        }
    }

    pub fn input(path: &Path, msg: impl ToString) -> Self {
        AppError::Input {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    pub fn format(path: &Path, msg: impl ToString) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        AppError::Output {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Tags core errors with the pipeline stage they came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, CoreError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| AppError::Stage { stage, source })
    }
}

//! Error type of the std crate and its mapping to process exit codes.

use std::path::{Path, PathBuf};

use trustgossip_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl AppError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        AppError::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn config(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        AppError::Config {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(e) if e.is_numeric() => exit::NUMERIC,
            AppError::Core(
                CoreError::InvalidConfig(_)
                | CoreError::InvalidSpec(_)
                | CoreError::DataExhausted { .. }
                | CoreError::NotStronglyConnected,
            ) => exit::CONFIG,
            AppError::Config { .. } | AppError::Usage(_) => exit::CONFIG,
            _ => exit::FAILURE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(AppError::from(CoreError::TrainingDiverged("nan".into())).exit_code(), 3);
        assert_eq!(AppError::from(CoreError::DegenerateRow { row: 1 }).exit_code(), 3);
        assert_eq!(AppError::from(CoreError::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(AppError::config("a.toml", "bad").exit_code(), 2);
        assert_eq!(AppError::format("a.bin", "bad").exit_code(), 1);
    }
}

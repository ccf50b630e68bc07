use std::path::Path;

/// Failures of the command-line layer, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        AppError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<taste_core::Error> for AppError {
    fn from(e: taste_core::Error) -> Self {
        use taste_core::Error as E;
        match e {
            E::Config(_) => AppError::Config(e.to_string()),
            E::NonFinite(_) => AppError::Numerical(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;

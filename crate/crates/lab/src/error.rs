use jacobi_lab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numeric error: {0}")]
    Numeric(#[from] LabError),

    #[error("{failed} of {total} cells failed")]
    Partial { failed: usize, total: usize },
}

impl HarnessError {
    pub fn config(path: &str, message: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.to_string(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Io(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Partial { .. } => 4,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

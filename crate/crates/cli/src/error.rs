use thiserror::Error;

/// Failures reported by the command-line tool, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input file (exit status 1).
    #[error("{0}")]
    Validation(String),
    /// Failure while running (exit status 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("I/O error: {e}"))
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("usage error: {0}")]
    Usage(String),
    /// Failure while running a valid command; exit code 2.
    #[error(transparent)]
    Runtime(#[from] csnet_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

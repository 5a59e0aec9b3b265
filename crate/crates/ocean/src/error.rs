use std::path::Path;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files. Exit code 2.
    #[error("{0}")]
    Config(String),
    /// Divergence or non-finite values. Exit code 3.
    #[error("{0}")]
    Numeric(String),
    /// Unreadable or mismatched weight files and other artifacts. Exit code 4.
    #[error("{0}")]
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Config(format!("{}: {}", path.display(), e))
    }
}

impl From<ocean_core::Error> for CliError {
    fn from(e: ocean_core::Error) -> Self {
        match e {
            ocean_core::Error::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

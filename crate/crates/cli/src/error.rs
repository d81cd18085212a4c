use thiserror::Error;

/// Failure categories, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// The run configuration or command line is unusable.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] elastic_ard::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn csv(path: &std::path::Path, message: impl ToString) -> Self {
        CliError::Csv { path: path.display().to_string(), message: message.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

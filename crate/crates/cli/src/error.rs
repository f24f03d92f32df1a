use std::path::PathBuf;

/// Exit code for bad arguments or configuration.
pub const EXIT_USAGE: u8 = 1;
/// Exit code for unreadable data, I/O failures and numerical errors.
pub const EXIT_DATA: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] voxsr::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Core(voxsr::Error::Config(_)) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Core(_) | CliError::Data(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

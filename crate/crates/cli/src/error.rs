use std::path::PathBuf;

use stream_ttt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, bad flags or an invalid spec. Exit code 1.
    #[error("invalid configuration: {0}")]
    Validation(String),
    /// A run failed after it started. Exit code 2.
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what} file {path}: {message}")]
    Format { what: &'static str, path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Format { .. } => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Tags a core error with the config section it came from.
    pub(crate) fn core(section: &str, err: CoreError) -> CliError {
        match err {
            CoreError::InvalidSpec(_)
            | CoreError::DimensionMismatch { .. }
            | CoreError::Unsupported(_)
            | CoreError::IllConditioned(_) => CliError::Validation(format!("{section}: {err}")),
            _ => CliError::Runtime(format!("{section}: {err}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

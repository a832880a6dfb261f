use frk_core::FrkError;
use thiserror::Error;

/// Failures of a CLI command. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Wraps a core error, prefixing the config key or file position at fault.
    pub fn from_core(context: impl AsRef<str>, err: FrkError) -> Self {
        let msg = format!("{}: {err}", context.as_ref());
        match err {
            FrkError::InnerConvergence { .. } | FrkError::Numerical(_) => CliError::Numerical(msg),
            _ => CliError::Config(msg),
        }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches context to core results.
pub trait Context<T> {
    fn context(self, what: impl AsRef<str>) -> CliResult<T>;
}

impl<T> Context<T> for frk_core::Result<T> {
    fn context(self, what: impl AsRef<str>) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(what, e))
    }
}

use std::path::Path;

/// Failures a command can end with, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation: unknown flags, missing arguments, bad environment.
    #[error("{0}")]
    Usage(String),
    /// Inputs that exist but are unusable: corrupt files, shape mismatches,
    /// missing calibration data.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<fgmp::Error> for CliError {
    fn from(e: fgmp::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a file name to library errors.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> WithPath<T> for std::result::Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

use std::fmt;
use std::path::Path;

use gnflow_core::Error;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// Errors while reading input files are data errors whatever their kind.
    pub fn data(context: impl fmt::Display, e: impl fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

/// Classifies errors raised while configuring or running a model.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => CliError::Usage(msg),
            Error::Format { .. } | Error::Io(_) => CliError::Data(msg),
            Error::Numerical(_) | Error::Diverged { .. } | Error::Diff(_) => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

use std::path::PathBuf;

use nln_sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("simulation failed: {0}")]
    Simulation(#[from] SimError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed report: {message}")]
    Report { path: String, message: String },
}

impl HarnessError {
    /// Process exit status for the command line: 2 for configuration
    /// problems, 3 for failed simulations, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Simulation(SimError::Config(_)) => 2,
            HarnessError::Simulation(_) => 3,
            _ => 1,
        }
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

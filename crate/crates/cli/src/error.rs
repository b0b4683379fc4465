//! Command-line errors and their exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("cannot parse {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("bad override: {0}")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Run(#[from] priorzero::error::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for anything wrong with the inputs, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile { .. } | CliError::Parse { .. } | CliError::Override(_) | CliError::Invalid(_) => 2,
            CliError::Run(priorzero::error::Error::Config(_)) => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

use std::process::ExitCode;

/// Failure of a subcommand, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The configuration or the command line is unusable. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Something failed while running. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] hamprune::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }

    /// Library errors that stem from configured values rather than from the
    /// run itself.
    pub fn config_from(e: hamprune::Error) -> Self {
        match e {
            hamprune::Error::InvalidArgument(msg) => CliError::Config(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

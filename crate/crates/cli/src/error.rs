use std::fmt::Display;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failure of a command, classified for the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configs or inputs detected before any work starts.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: flowlab_core::Error,
    },
}

impl CliError {
    pub fn validation(msg: impl Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Stage { .. } => 2,
        }
    }
}

/// Attaches a stage name to core errors.
pub trait StageExt<T> {
    fn stage(self, name: &str) -> CliResult<T>;
    fn invalid(self) -> CliResult<T>;
}

impl<T> StageExt<T> for flowlab_core::Result<T> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage {
            stage: name.to_string(),
            source,
        })
    }

    fn invalid(self) -> CliResult<T> {
        self.map_err(CliError::validation)
    }
}

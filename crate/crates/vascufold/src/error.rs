use thiserror::Error;
use vascufold_model::ModelError;

/// Command failure, split by who can fix it.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    #[error("{0}")]
    User(String),
    /// A numerical or structural invariant broke inside the pipeline.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<vascufold_core::Error> for CliError {
    fn from(e: vascufold_core::Error) -> Self {
        match e {
            vascufold_core::Error::Numerical(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Core(inner) => inner.into(),
            ModelError::Diverged(_) => {
                CliError::User(format!("{e}; lower training.learning_rate or set training.grad_clip"))
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("serialization failed: {e}"))
    }
}

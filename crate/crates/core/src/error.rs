use thiserror::Error;

use crate::model::MissionId;

pub type Result<T, E = FrescoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrescoError {
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("scenario error for mission {mission}: {reason}")]
    Scenario { mission: MissionId, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {reason}")]
    Parse { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FrescoError {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        FrescoError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(what: &'static str, reason: impl ToString) -> Self {
        FrescoError::Parse {
            what,
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by user input rather than the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FrescoError::Config { .. } | FrescoError::Argument(_) | FrescoError::Parse { .. }
        )
    }
}

use std::path::Path;

use thiserror::Error;

use fresco::FrescoError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] FrescoError),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{0}")]
    Usage(String),

    #[error("audit found {0} violation(s)")]
    Audit(usize),

    #[error("{failed} of {total} runs failed")]
    Runs { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 1 validation, 2 runtime, 3 audit violation.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Usage(_) => 1,
            CliError::Audit(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(FrescoError::Argument("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(FrescoError::Contract("x".into())).exit_code(), 2);
        assert_eq!(CliError::io(Path::new("p"), std::io::Error::other("x")).exit_code(), 2);
        assert_eq!(CliError::Runs { failed: 1, total: 2 }.exit_code(), 2);
        assert_eq!(CliError::Audit(4).exit_code(), 3);
    }
}

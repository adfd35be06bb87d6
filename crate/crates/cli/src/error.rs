use std::path::PathBuf;

use thiserror::Error;

/// Failure categories, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Lib(#[from] fusedkv::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invariant failed: {0}")]
    Invariant(String),

    #[error("comparison aborted, {member} failed: {source}; partial reports kept")]
    Aborted {
        member: String,
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 configuration, 2 runtime or divergence, 3 invariant failure.
    pub fn exit_code(&self) -> u8 {
        use fusedkv::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Lib(E::Config(_) | E::UnknownStrategy(_) | E::UnknownMethod(_)) => 1,
            CliError::Lib(_) | CliError::Io { .. } => 2,
            CliError::Invariant(_) => 3,
            CliError::Aborted { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_failure_category() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Lib(fusedkv::Error::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::io("p", std::io::Error::other("x")).exit_code(), 2);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 3);
        let aborted = CliError::Aborted {
            member: "YOCO".into(),
            source: Box::new(CliError::Invariant("x".into())),
        };
        assert_eq!(aborted.exit_code(), 3);
    }
}

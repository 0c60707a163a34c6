use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] eemax_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },

    #[error("replay produced different output: {0}")]
    Mismatch(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 success, 2 usage or input problem, 3 numerical abort, 1 anything
    /// else.
    pub fn exit_code(&self) -> i32 {
        use eemax_core::Error as E;
        match self {
            Self::Core(E::NonFiniteLoss { .. }) => 3,
            Self::Core(
                E::InvalidConfig(_)
                | E::MalformedHeader(_)
                | E::DimensionMismatch(_)
                | E::EmptyDataset
                | E::TooLargeForGrid { .. }
                | E::State(_)
                | E::Io(_)
                | E::NonPositiveGain { .. }
                | E::ZeroServingVector,
            ) => 2,
            Self::Core(_) => 1,
            Self::Usage(_) | Self::Io { .. } | Self::Manifest { .. } => 2,
            Self::Mismatch(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eemax_core::Error as E;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::from(E::NonFiniteLoss { epoch: 3, sample: 7 }).exit_code(), 3);
        assert_eq!(CliError::from(E::TooLargeForGrid { users: 7, limit: 4 }).exit_code(), 2);
        assert_eq!(CliError::from(E::EmptyDataset).exit_code(), 2);
        assert_eq!(CliError::from(E::MalformedHeader("x".into())).exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(E::NonScalarRoot(vec![2])).exit_code(), 1);
        assert_eq!(CliError::Mismatch("x".into()).exit_code(), 1);
    }
}

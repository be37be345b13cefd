use kfs_core::KfsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] KfsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 2 for configuration and data problems, 3 for checkpoints, 4 for
    /// failed invariants, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => core_code(e),
        }
    }
}

fn core_code(e: &KfsError) -> i32 {
    match e {
        KfsError::Config(_) | KfsError::Data(_) | KfsError::Cell { .. } => 2,
        KfsError::Checkpoint(_) => 3,
        KfsError::NonFiniteLoss { .. } | KfsError::NonFiniteGradient(_) => 4,
        KfsError::AtScale { source, .. } => core_code(source),
        _ => 1,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

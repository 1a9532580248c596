use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] chanprobe::Error),

    #[error("missing artifact {path}: run `chanprobe {stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("artifact {path} was written under config {found}, current config is {expected}: rerun `chanprobe {stage}`")]
    StaleArtifact {
        stage: &'static str,
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::StaleArtifact { .. } => 4,
            CliError::Backend(chanprobe::Error::Validation(_) | chanprobe::Error::Schema(_)) => 2,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

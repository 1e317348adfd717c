use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

/// Failure of a pipeline stage, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what} ({})", path.display())]
    MissingArtifact { what: String, path: PathBuf },
    #[error("malformed artifact {}: {reason}", path.display())]
    Artifact { path: PathBuf, reason: String },
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] bohmflow_core::Error),
    #[error("{failed} of {total} claims failed")]
    ClaimsFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 pass, 1 usage/config error, 2 invalid run, 3 claims failed.
    pub fn exit_code(&self) -> i32 {
        use bohmflow_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::MissingArtifact { .. } => 1,
            CliError::Core(E::InvalidArgument(_) | E::InvalidGrid(_) | E::ShapeMismatch { .. }) => 1,
            CliError::Artifact { .. } | CliError::InvalidRun(_) | CliError::Io { .. } | CliError::Core(_) => 2,
            CliError::ClaimsFailed { .. } => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Artifact { .. } => "artifact",
            CliError::InvalidRun(_) => "invalid_run",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "numerics",
            CliError::ClaimsFailed { .. } => "claims_failed",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Out {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .expect("error json")
    }
}

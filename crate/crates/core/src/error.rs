use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at {location}: field `{field}`: {message}")]
    Parse {
        location: String,
        field: String,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("latent state became non-finite at grid index {grid_index}")]
    Divergence { grid_index: usize },

    #[error("training diverged{}: {reason}", epoch.map(|e| format!(" in epoch {e}")).unwrap_or_default())]
    TrainingDiverged {
        epoch: Option<usize>,
        reason: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        location: impl Into<String>,
        field: impl Into<String>,
        message: impl std::fmt::Display,
    ) -> Self {
        Error::Parse {
            location: location.into(),
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numerical divergence (latent blow-up or
    /// non-finite gradients).
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } | Error::TrainingDiverged { .. } => true,
            Error::Stage { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// True when the root cause is a malformed configuration or input.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::UnsupportedVersion { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

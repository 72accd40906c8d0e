use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("stale activation cache: cache generation {cache}, parameters at generation {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("no voxel crosses iso level {iso}; the density grid peaks at {max_density}, try a lower iso level")]
    EmptySurface { iso: f64, max_density: f64 },

    #[error("training diverged at iteration {iteration} (stage {stage}); last finite state was kept")]
    Diverged { stage: u8, iteration: u64 },

    #[error("missing {what}: {remedy}")]
    MissingArtifact { what: String, remedy: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("metric input error: {0}")]
    Metric(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Metric(_) => 4,
            Error::Stage { source, .. } => match source.as_ref() {
                Error::Config(_) => 2,
                Error::Metric(_) => 4,
                _ => 3,
            },
            _ => 3,
        }
    }
}

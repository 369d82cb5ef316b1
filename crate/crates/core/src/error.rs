use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("matrix is not symmetric: |m[{row},{col}] - m[{col},{row}]| = {gap:e}")]
    SymmetryViolation { row: usize, col: usize, gap: f64 },

    #[error("linear system is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("degenerate graph: vertex {vertex} has zero degree")]
    DegenerateGraph { vertex: usize },

    #[error("degenerate similarity: every pairwise signature distance is zero")]
    DegenerateSimilarity,

    #[error("optimizer diverged at iteration {iteration}: objective is not finite")]
    Divergence { iteration: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Alignment { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::DegenerateGraph { .. }
            | Error::DegenerateSimilarity
            | Error::Divergence { .. }
            | Error::NonFinite(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}

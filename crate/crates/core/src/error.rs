use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tape sealed")]
    TapeSealed,
    #[error("node {0} is not on this tape")]
    NotOnTape(usize),
    #[error("{op}: argument {value} outside domain")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite function value at probe of parameter {index}")]
    NonFiniteProbe { index: usize },
    #[error(
        "singular configuration (theta={theta:.4}, phi={phi:.4}){}{}",
        agent.map(|a| format!(" agent {a}")).unwrap_or_default(),
        frame.map(|f| format!(" frame {f}")).unwrap_or_default()
    )]
    Singularity {
        theta: f64,
        phi: f64,
        agent: Option<usize>,
        frame: Option<usize>,
    },
    #[error("ill-conditioned inertia matrix (pivot ratio {ratio:e})")]
    IllConditioned { ratio: f64 },
    #[error("agent overlap: carts {distance:e} m apart")]
    AgentOverlap { distance: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 validation, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Validation { .. }
            | Error::Parse { .. }
            | Error::Shape(_)
            | Error::Checkpoint(_)
            | Error::TapeSealed
            | Error::NotOnTape(_) => 1,
            Error::Domain { .. }
            | Error::NonFinite(_)
            | Error::NonFiniteProbe { .. }
            | Error::Singularity { .. }
            | Error::IllConditioned { .. }
            | Error::AgentOverlap { .. }
            | Error::Diverged { .. } => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

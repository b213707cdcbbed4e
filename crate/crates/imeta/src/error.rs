//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value produced at graph node {node}")]
    NonFinite { node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inner solve diverged at step {step} (non-finite iterate)")]
    Divergence { step: u64 },

    #[error("non-positive curvature detected in CG (p'Mp = {curvature:.3e}); the system is not positive definite; increase lambda")]
    NonPositiveCurvature { curvature: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("line search requires a descent direction (grad'dir = {slope:.3e} >= 0)")]
    NotDescent { slope: f64 },

    #[error("unsupported task kind: {0}")]
    UnsupportedKind(String),

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("bound hypothesis violated: delta = {delta:.3e} must be < mu/(2 rho) = {limit:.3e}")]
    BoundHypothesis { delta: f64, limit: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Runtime(String),

    #[error("task {task_id} failed: {source}")]
    TaskFailed {
        task_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

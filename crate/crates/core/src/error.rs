use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("exact transport oracle refuses n = {n} points (limit {limit})")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("sinkhorn did not converge after {iters} iterations (marginal violation {violation:e})")]
    SinkhornNonConvergence { iters: usize, violation: f64 },

    #[error("mean vector is zero; cosine discrepancy is undefined")]
    ZeroMean,

    #[error("step size {alpha} outside the contraction window (0, 2*mu/L^2 = {limit})")]
    StepOutsideWindow { alpha: f64, limit: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at step {step}, batch element {element}: {detail}")]
    NonFiniteLoss {
        step: u64,
        element: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

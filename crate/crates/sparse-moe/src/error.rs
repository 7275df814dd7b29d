//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between two operands; carries both shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{0}")]
    Invalid(String),

    /// A softmax row with no finite entries has no defined distribution.
    #[error("softmax: row {0} has no finite entries")]
    DegenerateSoftmax(usize),

    #[error("{0}: batch is empty")]
    EmptyBatch(&'static str),

    /// The smooth load estimator is undefined when gating noise is disabled.
    #[error("load estimator requires noisy gating (noise is disabled)")]
    LoadRequiresNoise,

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

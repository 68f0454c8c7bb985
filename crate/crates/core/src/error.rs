//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("nothing to aggregate: empty input")]
    EmptyAggregation,

    #[error("invalid weight {0}: weights must be non-negative")]
    InvalidWeight(f64),

    #[error("degenerate zero-norm vector")]
    DegenerateVector,

    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },

    #[error("cannot select {k} distinct items out of {n}")]
    Selection { k: usize, n: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged: non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: &'static str },

    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchSize { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("infeasible world config: {0}")]
    Config(String),

    #[error("cannot partition: {0}")]
    Partition(String),

    #[error("invalid distance {0}: distances must be non-negative")]
    InvalidDistance(f64),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("distillation label shape mismatch: expected {expected}, got {got}")]
    DistillationShape { expected: usize, got: usize },

    #[error("round {round} failed for client {client}: {source}")]
    RoundFailed {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

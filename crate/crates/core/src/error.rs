use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("logits contain a non-finite entry at index {0}")]
    NonFiniteLogits(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("empty residual: p and q are identical")]
    EmptyResidual,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary mismatch: target has {target}, draft has {draft}")]
    VocabMismatch { target: usize, draft: usize },
    #[error("state space {states} exceeds {limit}; use marginal diagnostics instead")]
    StateSpaceTooLarge { states: u128, limit: u128 },
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors shared across the workspace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("loss is not a scalar (shape {rows}x{cols})")]
    LossNotScalar { rows: usize, cols: usize },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("insufficient support: requested {k} draws, only {available} positive entries")]
    InsufficientSupport { k: usize, available: usize },

    #[error("mask too aggressive: {unmasked} experts usable, need {k}")]
    MaskTooAggressive { unmasked: usize, k: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("forced trajectory does not cover position {position}, layer {layer}")]
    IncompleteTrajectory { position: usize, layer: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty scope: no routing records matched")]
    EmptyScope,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing stored log-probabilities: {0}")]
    MissingLogProbs(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use alloc::string::String;

/// Errors produced by the simulator core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("category {category} exhausted: requested {requested} tokens, {available} left")]
    DataExhausted {
        category: usize,
        requested: usize,
        available: usize,
    },
    #[error("token id {token} out of vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("client {client} has zero-norm adapter weights")]
    DegenerateWeights { client: usize },
    #[error("trust row {row} has no mass left")]
    DegenerateRow { row: usize },
    #[error("incompatible logits: {0}")]
    IncompatibleLogits(String),
    #[error("incompatible deltas: {0}")]
    IncompatibleDelta(String),
    #[error("incompatible results: {0}")]
    IncompatibleResults(String),
    #[error("topology is not strongly connected")]
    NotStronglyConnected,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

impl Error {
    /// True for failures caused by numerics rather than by configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::TrainingDiverged(_) | Error::DegenerateWeights { .. } | Error::DegenerateRow { .. }
        )
    }
}

pub type Result<T> = core::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} of the attention mask has no unmasked entry")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid corpus locations: {0}")]
    Locations(String),

    #[error("training diverged at step {step}: loss {loss}, parameter norm {param_norm}")]
    Diverged { step: usize, loss: f64, param_norm: f64 },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GamError>;

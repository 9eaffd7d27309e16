use thiserror::Error;

#[derive(Debug, Error)]
pub enum AbqError {
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("code {code} at ({row}, {col}) does not fit in {planes} bit planes")]
    CodeOutOfRange {
        row: usize,
        col: usize,
        code: u32,
        planes: u32,
    },

    #[error(
        "accumulator overflow risk: p({p}) + q({q}) + ceil(log2(K+1))({k_bits}) = {} > 31",
        p + q + k_bits
    )]
    Overflow { p: u32, q: u32, k_bits: u32 },

    #[error("invalid tile config {config}: {reason}")]
    InvalidTile { config: String, reason: String },

    #[error("candidate {config} produced a result that differs from the reference")]
    TileMismatch { config: String },

    #[error("non-finite loss at step {step}: {snapshot}")]
    Diverged { step: usize, snapshot: String },

    #[error("invalid probability rows: {0}")]
    NotStochastic(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AbqError> = std::result::Result<T, E>;

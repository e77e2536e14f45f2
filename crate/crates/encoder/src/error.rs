use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("event at position {pos} has no tokenized payload")]
    Untokenized { pos: usize },
    #[error("dense payload of length {found}, expected {expected}")]
    DenseDim { found: usize, expected: usize },
    #[error("unstructured target has zero norm")]
    DegenerateTarget,
    #[error("prompt modality must be diagnosis, note or image")]
    BadPrompt,
    #[error("as-of time {as_of_min} precedes birth")]
    BeforeBirth { as_of_min: i64 },
    #[error("training diverged at iteration {iter}: non-finite loss")]
    Divergence { iter: usize },
    #[error("hazard {0} outside (0, 1)")]
    HazardRange(f64),
    #[error("observed bin {bin} outside 1..={n_bins}")]
    BinRange { bin: usize, n_bins: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] chronoscope_core::CoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

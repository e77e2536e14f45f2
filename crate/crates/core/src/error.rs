use thiserror::Error;

use crate::domain::Modality;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("split ratios ({0}, {1}, {2}) must be non-negative and sum to 1")]
    InvalidRatios(f64, f64, f64),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("code {code} has a degenerate (constant) value distribution")]
    Degenerate { code: String },
    #[error("code {code} needs at least 2 distinct values, got {distinct}")]
    TooFewValues { code: String, distinct: usize },
    #[error("no bin or category specification for {modality:?} code {code}")]
    MissingSpec { modality: Modality, code: String },
    #[error("{modality:?} code {code} has no subdomain class")]
    MissingSubdomain { modality: Modality, code: String },
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("time {t_min} is outside the generator horizon [0, {horizon_min}]")]
    BeyondHorizon { t_min: i64, horizon_min: i64 },
    #[error("task {task}: no eligible patients")]
    NoEligiblePatients { task: String },
    #[error("malformed binary cohort: {0}")]
    Format(String),
    #[error("unsupported schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

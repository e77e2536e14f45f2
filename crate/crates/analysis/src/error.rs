use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("k = {k} exceeds the {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("embedding for {0} has zero norm")]
    ZeroEmbedding(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("cohort member {0} is not in the index")]
    NotInIndex(String),
    #[error("cohort too small: {size} members for {folds} folds")]
    CohortTooSmall { size: usize, folds: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("baseline and input shapes differ")]
    Shape,
    #[error("no events in interval ({t0}, {t1}]")]
    EmptyInterval { t0: i64, t1: i64 },
    #[error("empty high-risk set")]
    EmptyHighRisk,
    #[error("patient has no note event before {0}")]
    NoNote(i64),
    #[error(transparent)]
    Encoder(#[from] chronoscope_encoder::EncoderError),
    #[error(transparent)]
    Survival(#[from] chronoscope_survival::SurvivalError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

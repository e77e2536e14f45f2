use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("need more than {n_components} samples, found {n_samples}")]
    TooFewSamples { n_samples: usize, n_components: usize },
    #[error("no uncensored instances")]
    NoEvents,
    #[error("Cox fit did not converge (penalizers tried: {path:?})")]
    NonConvergence { path: Vec<f64> },
    #[error("empty risk set at event time {0}")]
    EmptyRiskSet(f64),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("censoring survival is zero at {0}")]
    ZeroCensoringSurvival(f64),
    #[error("{undefined} of {total} bootstrap resamples undefined (limit 10%)")]
    TooManyUndefined { undefined: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, SurvivalError>;

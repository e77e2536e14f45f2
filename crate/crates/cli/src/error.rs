use chronoscope_analysis::AnalysisError;
use chronoscope_core::CoreError;
use chronoscope_encoder::EncoderError;
use chronoscope_survival::SurvivalError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("stage {stage} needs {missing}; run `{stage_hint}` first")]
    Dependency {
        stage: String,
        missing: String,
        stage_hint: String,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn in_stage(self, stage: &str) -> Self {
        CliError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        let numeric = match self {
            CliError::Stage { source, .. } => return source.exit_code(),
            CliError::Encoder(e) => matches!(e, EncoderError::Divergence { .. } | EncoderError::HazardRange(_)),
            CliError::Survival(e) => matches!(
                e,
                SurvivalError::NonConvergence { .. }
                    | SurvivalError::ZeroCensoringSurvival(_)
                    | SurvivalError::TooManyUndefined { .. }
            ),
            CliError::Analysis(e) => match e {
                AnalysisError::NonFiniteGradient => true,
                AnalysisError::Encoder(EncoderError::Divergence { .. }) => true,
                AnalysisError::Survival(SurvivalError::NonConvergence { .. }) => true,
                _ => false,
            },
            _ => false,
        };
        if numeric {
            3
        } else {
            2
        }
    }
}

//! Pipeline configuration (JSON with a schema version).

use chronoscope_core::curation::{EndpointRule, SnapshotRule, SplitPolicy, TaskCategory, TaskSpec};
use chronoscope_core::synth::CohortConfig;
use chronoscope_core::Modality;
use chronoscope_encoder::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_components: usize,
    pub penalizer: f64,
    pub case_cohort_ratio: usize,
    pub n_bootstraps: usize,
    pub prompt: Modality,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            n_components: 50,
            penalizer: 1e-4,
            case_cohort_ratio: 4,
            n_bootstraps: 100,
            prompt: Modality::Diagnosis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Seed for splits, curation, sampling and bootstraps.
    pub seed: u64,
    pub cohort: CohortConfig,
    /// Tokenizer fitting and pretraining use only the first this-many patients.
    #[serde(default)]
    pub pretrain_patients: Option<usize>,
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub head: HeadConfig,
}

/// Onset of the planted endpoint: a discharge after five visits, horizon 2 years.
pub fn planted_onset_task() -> TaskSpec {
    TaskSpec {
        name: "planted_onset".into(),
        category: TaskCategory::Onset,
        tau_days: 730,
        snapshot_rule: SnapshotRule::Discharge { min_prior_visits: 5 },
        endpoint_rule: EndpointRule {
            codes: vec!["EP_ONSET".into()],
            include_death: false,
        },
        sex_filter: None,
        age_sd_filter: false,
    }
}

/// All-cause mortality one year after each discharge.
pub fn mortality_task() -> TaskSpec {
    TaskSpec {
        name: "mortality_1y".into(),
        category: TaskCategory::Onset,
        tau_days: 365,
        snapshot_rule: SnapshotRule::Discharge { min_prior_visits: 5 },
        endpoint_rule: EndpointRule {
            codes: vec![],
            include_death: true,
        },
        sex_filter: None,
        age_sd_filter: false,
    }
}

impl PipelineConfig {
    /// The reference desk configuration: 10,000 patients, pretraining on the first 5,000.
    pub fn desk(seed: u64) -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            cohort: CohortConfig::standard(10_000, seed),
            pretrain_patients: Some(5_000),
            encoder: EncoderConfig {
                seed,
                ..EncoderConfig::desk()
            },
            tasks: vec![planted_onset_task(), mortality_task()],
            head: HeadConfig::default(),
        }
    }

    /// A minutes-scale configuration for smoke runs and tests.
    pub fn smoke(seed: u64) -> Self {
        let mut cohort = CohortConfig::standard(800, seed);
        // Enough onset events for a small test split.
        cohort.planted[0].baseline_hazard_per_year = 0.03;
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            cohort,
            pretrain_patients: None,
            encoder: EncoderConfig {
                seed,
                embed_dim: 16,
                n_heads: 2,
                mlp_width: 32,
                max_seq: 64,
                total_iters: 30,
                warmup_iters: 3,
                batch_size: 8,
                eval_every: 10,
                val_patients: 20,
                ..EncoderConfig::desk()
            },
            tasks: vec![planted_onset_task()],
            head: HeadConfig {
                n_components: 8,
                n_bootstraps: 20,
                ..HeadConfig::default()
            },
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "smoke" => Ok(Self::smoke(seed)),
            other => Err(CliError::Validation(format!("unknown preset {other} (desk, smoke)"))),
        }
    }

    /// Replaces every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cohort.seed = seed;
        self.encoder.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.cohort.validate()?;
        self.encoder.validate()?;
        for t in &self.tasks {
            t.validate()?;
        }
        if self.head.n_components == 0 || self.head.n_bootstraps == 0 || self.head.case_cohort_ratio == 0 {
            return Err(CliError::Validation("head settings must be positive".into()));
        }
        if !(self.head.penalizer >= 0.0) {
            return Err(CliError::Validation("penalizer must be >= 0".into()));
        }
        if self.pretrain_patients == Some(0) {
            return Err(CliError::Validation("pretrain_patients must be > 0".into()));
        }
        Ok(())
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            ratios: self.cohort.split_ratios,
            seed: self.seed,
        }
    }

    pub fn pretrain_prefix(&self) -> usize {
        self.pretrain_patients.unwrap_or(self.cohort.n_patients).min(self.cohort.n_patients)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

//! In-memory pipeline stages. File handling and caching live in `pipeline`.

use std::collections::HashMap;

use chronoscope_analysis::TaskModel;
use chronoscope_core::curation::{age_years, curate_task, CurationLog, TaskSpec, TteInstance};
use chronoscope_core::synth::{generate_cohort, oracle_hazard, CohortConfig, GeneratedCohort, PlantedRisk};
use chronoscope_core::tokenizer::{fit_and_tokenize, TokenizedCohort};
use chronoscope_core::{seeded_hash, Modality, PatientRecord, Split};
use chronoscope_encoder::{embed_patients, pretrain, EncoderParams, TrainReport};
use chronoscope_survival::{
    balanced_accuracy, bootstrap_ci, bootstrap_significance, calibration_indices, case_cohort_sample,
    estimate_baseline_hazard, evaluate_metric, fit_cox, fit_pca, kaplan_meier, BalancedAccuracy, Calibration,
    CoxModel, KmCurve, KmTarget, Metric, MetricReport, SignificanceResult,
};
use serde::{Deserialize, Serialize};

use crate::config::{HeadConfig, PipelineConfig};
use crate::error::{CliError, Result};

pub const EMBEDDING_MODEL: &str = "embedding";
pub const AGE_SEX_MODEL: &str = "age_sex";
pub const ORACLE_MODEL: &str = "oracle";

pub fn generate(cfg: &CohortConfig) -> Result<GeneratedCohort> {
    Ok(generate_cohort(cfg)?)
}

/// Training-split flags restricted to the pretraining prefix.
pub fn pretrain_mask(cfg: &PipelineConfig, patients: &[PatientRecord]) -> Vec<bool> {
    let policy = cfg.split_policy();
    let prefix = cfg.pretrain_prefix();
    patients
        .iter()
        .enumerate()
        .map(|(i, p)| i < prefix && policy.split_of(&p.patient_id) == Split::Train)
        .collect()
}

/// Fits tokenizer specs and vocabulary on the training prefix and tokenizes every patient.
pub fn tokenize(cfg: &PipelineConfig, cohort: &GeneratedCohort) -> Result<TokenizedCohort> {
    let is_train = pretrain_mask(cfg, &cohort.patients);
    Ok(fit_and_tokenize(&cohort.patients, &is_train, &cohort.manifest.world.subdomain_map)?)
}

/// Pretrains on the training patients of the prefix, validating on its validation patients.
pub fn pretrain_encoder(cfg: &PipelineConfig, tokenized: &TokenizedCohort) -> Result<(EncoderParams, TrainReport)> {
    let policy = cfg.split_policy();
    let prefix = cfg.pretrain_prefix();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in tokenized.patients.iter().take(prefix) {
        match policy.split_of(&p.patient_id) {
            Split::Train => train.push(p.clone()),
            Split::Val => val.push(p.clone()),
            Split::Test => {}
        }
    }
    Ok(pretrain(&train, &val, &tokenized.vocab, &cfg.encoder)?)
}

pub fn curate(cfg: &PipelineConfig, patients: &[PatientRecord], spec: &TaskSpec) -> Result<(Vec<TteInstance>, CurationLog)> {
    Ok(curate_task(patients, spec, &cfg.split_policy(), cfg.seed)?)
}

fn by_id(patients: &[PatientRecord]) -> HashMap<&str, &PatientRecord> {
    patients.iter().map(|p| (p.patient_id.as_str(), p)).collect()
}

fn lookup<'a>(map: &HashMap<&str, &'a PatientRecord>, id: &str) -> Result<&'a PatientRecord> {
    map.get(id)
        .copied()
        .ok_or_else(|| CliError::Validation(format!("patient {id} not in cohort")))
}

/// Embeds each instance's tokenized history up to its snapshot.
pub fn embed_instances(
    params: &EncoderParams,
    tokenized: &[PatientRecord],
    instances: &[TteInstance],
    prompt: Modality,
) -> Result<Vec<Vec<f64>>> {
    let map = by_id(tokenized);
    let queries = instances
        .iter()
        .map(|i| Ok((lookup(&map, &i.patient_id)?, i.snapshot_min)))
        .collect::<Result<Vec<_>>>()?;
    Ok(embed_patients(&queries, params, prompt)?)
}

/// Age in years at the snapshot and sex as 0/1.
pub fn age_sex_features(raw: &[PatientRecord], instances: &[TteInstance]) -> Result<Vec<Vec<f64>>> {
    let map = by_id(raw);
    instances
        .iter()
        .map(|i| {
            let p = lookup(&map, &i.patient_id)?;
            Ok(vec![age_years(i.snapshot_min), p.demographics.sex.index() as f64])
        })
        .collect()
}

/// Planted hazard at each snapshot, for the planted risk whose endpoint the task targets.
pub fn oracle_scores(cohort: &CohortConfig, raw: &[PatientRecord], spec: &TaskSpec, instances: &[TteInstance]) -> Result<Option<Vec<f64>>> {
    let Some(risk) = planted_risk_for(cohort, spec) else {
        return Ok(None);
    };
    let map = by_id(raw);
    let scores = instances
        .iter()
        .map(|i| Ok(oracle_hazard(lookup(&map, &i.patient_id)?, i.snapshot_min, cohort, risk)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(scores))
}

fn planted_risk_for<'a>(cohort: &'a CohortConfig, spec: &TaskSpec) -> Option<&'a PlantedRisk> {
    if spec.endpoint_rule.include_death || spec.endpoint_rule.codes.len() != 1 {
        return None;
    }
    cohort
        .planted
        .iter()
        .find(|r| r.endpoint_code == spec.endpoint_rule.codes[0])
}

#[derive(Clone, Debug, Default)]
pub struct SplitRows {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_rows(instances: &[TteInstance]) -> SplitRows {
    let mut s = SplitRows::default();
    for (i, inst) in instances.iter().enumerate() {
        match inst.split {
            Split::Train => s.train.push(i),
            Split::Val => s.val.push(i),
            Split::Test => s.test.push(i),
        }
    }
    s
}

fn pick<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn durations_events(instances: &[TteInstance], idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
    idx.iter()
        .map(|&i| (instances[i].duration_days, instances[i].event))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedTask {
    pub task: String,
    pub model: TaskModel,
    pub age_sex: CoxModel,
    /// Training rows (indices into the task's instance list) kept by case-cohort sampling.
    pub case_cohort_rows: Vec<usize>,
}

/// Cox on a feature matrix: fit on the sampled training rows, baseline on validation.
fn fit_head(x: &[Vec<f64>], instances: &[TteInstance], fit_rows: &[usize], val_rows: &[usize], penalizer: f64) -> Result<CoxModel> {
    let (d, e) = durations_events(instances, fit_rows);
    let cox = fit_cox(&pick(x, fit_rows), &d, &e, penalizer)?;
    let (dv, ev) = durations_events(instances, val_rows);
    Ok(estimate_baseline_hazard(&cox, &pick(x, val_rows), &dv, &ev)?)
}

/// PCA on all training embeddings, Cox on the case-cohort sample of the
/// training rows, Breslow baseline re-estimated on validation.
pub fn fit_task(
    head: &HeadConfig,
    spec: &TaskSpec,
    instances: &[TteInstance],
    embeddings: &[Vec<f64>],
    age_sex: &[Vec<f64>],
    seed: u64,
) -> Result<FittedTask> {
    let rows = split_rows(instances);
    if rows.train.is_empty() || rows.val.is_empty() {
        return Err(CliError::Validation(format!("task {}: empty train or validation split", spec.name)));
    }
    let pca = fit_pca(&pick(embeddings, &rows.train), head.n_components)?;
    let train_events: Vec<bool> = rows.train.iter().map(|&i| instances[i].event).collect();
    let sampled = case_cohort_sample(
        &train_events,
        head.case_cohort_ratio,
        seeded_hash(&format!("case_cohort:{}", spec.name), seed),
    )?;
    let fit_rows: Vec<usize> = sampled.iter().map(|&k| rows.train[k]).collect();
    let features = pca.project_all(embeddings)?;
    let cox = fit_head(&features, instances, &fit_rows, &rows.val, head.penalizer)?;
    let age_sex = fit_head(age_sex, instances, &fit_rows, &rows.val, head.penalizer)?;
    Ok(FittedTask {
        task: spec.name.clone(),
        model: TaskModel {
            pca,
            cox,
            prompt: head.prompt,
            tau_days: spec.tau_days as f64,
        },
        age_sex,
        case_cohort_rows: fit_rows,
    })
}

/// Linear predictors and event probabilities at tau for every instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub risk: Vec<f64>,
    pub probability: Vec<f64>,
}

pub fn score_embedding_model(model: &TaskModel, embeddings: &[Vec<f64>]) -> Result<Scores> {
    let features = model.pca.project_all(embeddings)?;
    score_cox(&model.cox, &features, model.tau_days)
}

pub fn score_cox(cox: &CoxModel, x: &[Vec<f64>], tau_days: f64) -> Result<Scores> {
    let risk = x.iter().map(|r| cox.predict_risk(r)).collect::<std::result::Result<Vec<_>, _>>()?;
    let probability = x
        .iter()
        .map(|r| cox.event_probability(r, tau_days))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Scores { risk, probability })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub metrics: Vec<MetricReport>,
    pub balanced_accuracy: Option<BalancedAccuracy>,
    /// Test-set decile calibration of the event probabilities at tau.
    pub calibration: Option<Calibration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub model_a: String,
    pub model_b: String,
    pub result: SignificanceResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: String,
    pub tau_days: f64,
    pub models: Vec<ModelEvaluation>,
    pub comparisons: Vec<Comparison>,
    /// Kaplan-Meier curve of the endpoint on the test split.
    pub test_km: KmCurve,
}

impl TaskEvaluation {
    pub fn metric(&self, model: &str, metric: Metric) -> Option<&MetricReport> {
        self.models
            .iter()
            .find(|m| m.model == model)?
            .metrics
            .iter()
            .find(|r| r.metric == metric.name())
    }
}

/// Scores for one model; `probability` is `None` for rank-only scores.
pub struct ModelScores<'a> {
    pub name: &'a str,
    pub risk: &'a [f64],
    pub probability: Option<&'a [f64]>,
}

fn metric_seed(seed: u64, task: &str, model: &str, metric: &str) -> u64 {
    seeded_hash(&format!("eval:{task}:{model}:{metric}"), seed)
}

/// Test-set metrics with bootstrap intervals, balanced accuracy with a
/// validation-chosen threshold, and AUC significance of the first model
/// against each of the others.
pub fn evaluate_task(
    spec: &TaskSpec,
    instances: &[TteInstance],
    models: &[ModelScores<'_>],
    n_boot: usize,
    seed: u64,
) -> Result<TaskEvaluation> {
    let rows = split_rows(instances);
    let tau = spec.tau_days as f64;
    let (dt, et) = durations_events(instances, &rows.test);
    let (dv, ev) = durations_events(instances, &rows.val);
    let mut out = Vec::new();
    for m in models {
        let risk_t = pick(m.risk, &rows.test);
        let prob_t = m.probability.map(|p| pick(p, &rows.test));
        let mut reports = Vec::new();
        for metric in Metric::ALL {
            if metric == Metric::BalancedAccuracy {
                continue;
            }
            let scores = if metric.needs_probabilities() {
                match &prob_t {
                    Some(p) => p,
                    None => continue,
                }
            } else {
                &risk_t
            };
            let sample = bootstrap_ci(dt.len(), n_boot, metric_seed(seed, &spec.name, m.name, metric.name()), |idx| {
                evaluate_metric(metric, scores, &dt, &et, tau, idx)
            })?;
            reports.push(MetricReport::from_sample(metric.name(), &sample, n_boot, &dt, &et, tau));
        }
        let ba = balanced_accuracy(&pick(m.risk, &rows.val), &dv, &ev, &risk_t, &dt, &et, tau).ok();
        let calibration = prob_t
            .as_ref()
            .and_then(|p| calibration_indices(p, &dt, &et, tau, 10).ok());
        out.push(ModelEvaluation {
            model: m.name.to_string(),
            metrics: reports,
            balanced_accuracy: ba,
            calibration,
        });
    }
    let mut comparisons = Vec::new();
    if let Some((first, rest)) = models.split_first() {
        let a = pick(first.risk, &rows.test);
        for other in rest {
            let b = pick(other.risk, &rows.test);
            let result = bootstrap_significance(
                dt.len(),
                n_boot,
                metric_seed(seed, &spec.name, &format!("{}-{}", first.name, other.name), "sig"),
                |idx| evaluate_metric(Metric::Auc, &a, &dt, &et, tau, idx),
                |idx| evaluate_metric(Metric::Auc, &b, &dt, &et, tau, idx),
            )?;
            comparisons.push(Comparison {
                metric: Metric::Auc.name().into(),
                model_a: first.name.into(),
                model_b: other.name.into(),
                result,
            });
        }
    }
    Ok(TaskEvaluation {
        task: spec.name.clone(),
        tau_days: tau,
        models: out,
        comparisons,
        test_km: kaplan_meier(&dt, &et, KmTarget::Event)?,
    })
}

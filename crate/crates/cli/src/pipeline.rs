//! Cached, hash-chained execution of the stages over a cache directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chronoscope_core::curation::{read_instances_csv, write_instances_csv, CurationLog, TaskSpec, TteInstance};
use chronoscope_core::io::{load_binary, save_binary};
use chronoscope_core::synth::{CohortManifest, GeneratedCohort};
use chronoscope_core::tokenizer::TokenizerSpecs;
use chronoscope_core::{PatientRecord, Vocabulary};
use chronoscope_encoder::{checkpoint, EncoderParams, TrainReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::report;
use crate::stages::{self, FittedTask, ModelScores, TaskEvaluation, AGE_SEX_MODEL, EMBEDDING_MODEL, ORACLE_MODEL};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Tokenize,
    Pretrain,
    Curate,
    Embed,
    Fit,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Tokenize,
        Stage::Pretrain,
        Stage::Curate,
        Stage::Embed,
        Stage::Fit,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Tokenize => "tokenize",
            Stage::Pretrain => "pretrain",
            Stage::Curate => "curate",
            Stage::Embed => "embed",
            Stage::Fit => "fit",
            Stage::Evaluate => "evaluate",
        }
    }

    fn per_task(self) -> bool {
        self >= Stage::Curate
    }

    fn key(self, task: Option<&str>) -> String {
        match task {
            Some(t) if self.per_task() => format!("{}:{t}", self.name()),
            _ => self.name().to_string(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the cache directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_hash: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_clock_s: f64,
    /// True when this run reused the artifacts of an earlier run.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn stage(&self, key: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == key)
    }

    /// Every referenced artifact exists and matches its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in &self.stages {
            verify_artifacts(root, s)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }
}

fn verify_artifacts(root: &Path, s: &StageRecord) -> Result<()> {
    for a in &s.artifacts {
        let p = root.join(&a.path);
        if !p.exists() {
            return Err(CliError::Validation(format!("artifact {} of stage {} is missing", a.path, s.stage)));
        }
        if file_sha256(&p)? != a.sha256 {
            return Err(CliError::Validation(format!(
                "artifact {} of stage {} does not match its recorded hash",
                a.path, s.stage
            )));
        }
    }
    Ok(())
}

fn json_hash<T: Serialize>(parts: &[&str], value: &T) -> Result<String> {
    let mut s = parts.join("\u{1f}");
    s.push('\u{1f}');
    s.push_str(&serde_json::to_string(value)?);
    Ok(sha256_hex(s.as_bytes()))
}

/// Input hash of every stage, each chained on its upstream hashes.
pub fn stage_hashes(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut h = BTreeMap::new();
    let generate = json_hash(&["generate"], &cfg.cohort)?;
    let tokenize = json_hash(&["tokenize", &generate], &(cfg.seed, cfg.pretrain_prefix()))?;
    let pretrain = json_hash(&["pretrain", &tokenize], &cfg.encoder)?;
    for t in &cfg.tasks {
        let curate = json_hash(&["curate", &generate], &(t, cfg.seed))?;
        let embed = json_hash(&["embed", &pretrain, &curate], &cfg.head.prompt)?;
        let head = &cfg.head;
        let fit = json_hash(
            &["fit", &embed],
            &(head.n_components, head.penalizer, head.case_cohort_ratio, cfg.seed),
        )?;
        let evaluate = json_hash(&["evaluate", &fit], &(cfg.head.n_bootstraps, cfg.seed))?;
        h.insert(Stage::Curate.key(Some(&t.name)), curate);
        h.insert(Stage::Embed.key(Some(&t.name)), embed);
        h.insert(Stage::Fit.key(Some(&t.name)), fit);
        h.insert(Stage::Evaluate.key(Some(&t.name)), evaluate);
    }
    h.insert(Stage::Generate.key(None), generate);
    h.insert(Stage::Tokenize.key(None), tokenize);
    h.insert(Stage::Pretrain.key(None), pretrain);
    Ok(h)
}

/// File names inside the cache directory.
pub mod files {
    pub const COHORT: &str = "cohort.bin";
    pub const COHORT_MANIFEST: &str = "cohort.manifest.json";
    pub const TOKENIZED: &str = "tokenized.bin";
    pub const VOCAB: &str = "vocab.json";
    pub const TOKENIZER: &str = "tokenizer.json";
    pub const CHECKPOINT: &str = "encoder.ckpt";
    pub const PRETRAIN_REPORT: &str = "pretrain_report.json";
    pub const INSTANCES: &str = "instances.csv";
    pub const CURATION_LOG: &str = "curation.json";
    pub const EMBEDDINGS: &str = "embeddings.json";
    pub const FIT: &str = "fit.json";
    pub const EVALUATION: &str = "evaluation.json";
    pub const REPORT_DIR: &str = "report";

    pub fn task(name: &str, file: &str) -> String {
        format!("tasks/{name}/{file}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run only this stage, requiring its inputs from earlier runs.
    pub only: Option<Stage>,
    /// Restrict per-task stages to one task.
    pub task: Option<String>,
    /// Recompute even when the cache is valid.
    pub force: bool,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
    hashes: BTreeMap<String, String>,
    records: BTreeMap<String, StageRecord>,
    previous: BTreeMap<String, StageRecord>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let root = root.into();
        fs::create_dir_all(&root)?;
        let previous = match ExperimentManifest::load(&root) {
            Ok(Some(m)) => m.stages.into_iter().map(|s| (s.stage.clone(), s)).collect(),
            _ => BTreeMap::new(),
        };
        Ok(Pipeline {
            hashes: stage_hashes(&cfg)?,
            cfg,
            root,
            records: BTreeMap::new(),
            previous,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn tasks(&self, filter: Option<&str>) -> Result<Vec<TaskSpec>> {
        let tasks: Vec<TaskSpec> = self
            .cfg
            .tasks
            .iter()
            .filter(|t| filter.is_none_or(|f| t.name == f))
            .cloned()
            .collect();
        if let Some(f) = filter {
            if tasks.is_empty() {
                return Err(CliError::Validation(format!("unknown task {f}")));
            }
        }
        Ok(tasks)
    }

    /// Executes the requested stages in dependency order and writes the manifest.
    pub fn run(&mut self, opts: &RunOptions) -> Result<ExperimentManifest> {
        let tasks = self.tasks(opts.task.as_deref())?;
        for stage in Stage::ALL {
            if opts.only.is_some_and(|o| o != stage) {
                continue;
            }
            if stage.per_task() {
                for t in &tasks {
                    self.run_stage(stage, Some(t), opts.force)?;
                }
            } else {
                self.run_stage(stage, None, opts.force)?;
            }
        }
        if opts.only.is_none_or(|o| o == Stage::Evaluate) {
            self.emit_report().map_err(|e| e.in_stage("report"))?;
        }
        let manifest = self.manifest()?;
        write_json(&self.path(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    /// Records from this run, plus earlier records for stages not rerun.
    pub fn manifest(&self) -> Result<ExperimentManifest> {
        let mut merged = self.previous.clone();
        merged.retain(|k, _| self.hashes.contains_key(k));
        for (k, r) in &self.records {
            merged.insert(k.clone(), r.clone());
        }
        let mut stages: Vec<StageRecord> = merged.into_values().collect();
        let order = |key: &str| {
            let base = key.split(':').next().unwrap_or(key);
            Stage::ALL.iter().position(|s| s.name() == base).unwrap_or(usize::MAX)
        };
        stages.sort_by(|a, b| order(&a.stage).cmp(&order(&b.stage)).then(a.stage.cmp(&b.stage)));
        Ok(ExperimentManifest {
            schema_version: crate::config::SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            seed: self.cfg.seed,
            config_hash: json_hash(&["config"], &self.cfg)?,
            stages,
        })
    }

    fn artifacts(&self, stage: Stage, task: Option<&str>) -> Vec<String> {
        let t = |f: &str| files::task(task.unwrap_or_default(), f);
        match stage {
            Stage::Generate => vec![files::COHORT.into(), files::COHORT_MANIFEST.into()],
            Stage::Tokenize => vec![files::TOKENIZED.into(), files::VOCAB.into(), files::TOKENIZER.into()],
            Stage::Pretrain => vec![files::CHECKPOINT.into(), files::PRETRAIN_REPORT.into()],
            Stage::Curate => vec![t(files::INSTANCES), t(files::CURATION_LOG)],
            Stage::Embed => vec![t(files::EMBEDDINGS)],
            Stage::Fit => vec![t(files::FIT)],
            Stage::Evaluate => vec![t(files::EVALUATION)],
        }
    }

    fn cache_valid(&self, key: &str) -> bool {
        self.records
            .get(key)
            .or_else(|| self.previous.get(key))
            .is_some_and(|r| Some(&r.input_hash) == self.hashes.get(key) && verify_artifacts(&self.root, r).is_ok())
    }

    fn run_stage(&mut self, stage: Stage, task: Option<&TaskSpec>, force: bool) -> Result<()> {
        let name = task.map(|t| t.name.as_str());
        let key = stage.key(name);
        if !force && self.cache_valid(&key) {
            let mut r = self.records.get(&key).unwrap_or_else(|| &self.previous[&key]).clone();
            r.cached = true;
            self.records.insert(key, r);
            return Ok(());
        }
        let start = Instant::now();
        let out = match stage {
            Stage::Generate => self.do_generate(),
            Stage::Tokenize => self.do_tokenize(),
            Stage::Pretrain => self.do_pretrain(),
            Stage::Curate => self.do_curate(task.expect("per-task stage")),
            Stage::Embed => self.do_embed(task.expect("per-task stage")),
            Stage::Fit => self.do_fit(task.expect("per-task stage")),
            Stage::Evaluate => self.do_evaluate(task.expect("per-task stage")),
        };
        out.map_err(|e| match e {
            CliError::Dependency { .. } => e,
            other => other.in_stage(&key),
        })?;
        let artifacts = self
            .artifacts(stage, name)
            .into_iter()
            .map(|rel| {
                let p = self.path(&rel);
                Ok(ArtifactRecord {
                    sha256: file_sha256(&p)?,
                    bytes: fs::metadata(&p)?.len(),
                    path: rel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.records.insert(
            key.clone(),
            StageRecord {
                input_hash: self.hashes[&key].clone(),
                stage: key,
                seed: self.cfg.seed,
                artifacts,
                wall_clock_s: start.elapsed().as_secs_f64(),
                cached: false,
            },
        );
        Ok(())
    }

    /// Path of an upstream artifact, provided the upstream stage ran with the
    /// current configuration and its outputs are intact.
    fn need(&self, producer: Stage, task: Option<&str>, consumer: Stage, file: &str) -> Result<PathBuf> {
        let key = producer.key(task);
        let rel = if producer.per_task() {
            files::task(task.unwrap_or_default(), file)
        } else {
            file.to_string()
        };
        if !self.cache_valid(&key) {
            return Err(CliError::Dependency {
                stage: consumer.key(task),
                missing: rel,
                stage_hint: producer.name().to_string(),
            });
        }
        Ok(self.path(&rel))
    }

    fn do_generate(&self) -> Result<()> {
        let g = stages::generate(&self.cfg.cohort)?;
        save_binary(self.path(files::COHORT), &g.patients)?;
        write_json(&self.path(files::COHORT_MANIFEST), &g.manifest)?;
        Ok(())
    }

    fn load_generated(&self, consumer: Stage) -> Result<GeneratedCohort> {
        let patients = load_binary(self.need(Stage::Generate, None, consumer, files::COHORT)?)?;
        let manifest: CohortManifest = read_json(&self.need(Stage::Generate, None, consumer, files::COHORT_MANIFEST)?)?;
        Ok(GeneratedCohort { patients, manifest })
    }

    pub fn load_raw(&self, consumer: Stage) -> Result<Vec<PatientRecord>> {
        Ok(load_binary(self.need(Stage::Generate, None, consumer, files::COHORT)?)?)
    }

    fn do_tokenize(&self) -> Result<()> {
        let g = self.load_generated(Stage::Tokenize)?;
        let tc = stages::tokenize(&self.cfg, &g)?;
        save_binary(self.path(files::TOKENIZED), &tc.patients)?;
        tc.vocab.save(self.path(files::VOCAB))?;
        fs::write(self.path(files::TOKENIZER), tc.specs.to_json()?)?;
        Ok(())
    }

    pub fn load_tokenized(&self, consumer: Stage) -> Result<Vec<PatientRecord>> {
        Ok(load_binary(self.need(Stage::Tokenize, None, consumer, files::TOKENIZED)?)?)
    }

    fn do_pretrain(&self) -> Result<()> {
        let patients = self.load_tokenized(Stage::Pretrain)?;
        let vocab = Vocabulary::load(self.need(Stage::Tokenize, None, Stage::Pretrain, files::VOCAB)?)?;
        let specs = TokenizerSpecs::from_json(&fs::read_to_string(self.need(
            Stage::Tokenize,
            None,
            Stage::Pretrain,
            files::TOKENIZER,
        )?)?)?;
        let tc = chronoscope_core::tokenizer::TokenizedCohort {
            specs,
            vocab,
            patients,
            stats: Default::default(),
        };
        let (params, report) = stages::pretrain_encoder(&self.cfg, &tc)?;
        checkpoint::save(self.path(files::CHECKPOINT), &params)?;
        write_json(&self.path(files::PRETRAIN_REPORT), &report)?;
        Ok(())
    }

    pub fn load_encoder(&self, consumer: Stage) -> Result<EncoderParams> {
        Ok(checkpoint::load(self.need(Stage::Pretrain, None, consumer, files::CHECKPOINT)?)?)
    }

    pub fn load_pretrain_report(&self) -> Result<TrainReport> {
        read_json(&self.need(Stage::Pretrain, None, Stage::Embed, files::PRETRAIN_REPORT)?)
    }

    fn do_curate(&self, spec: &TaskSpec) -> Result<()> {
        let raw = self.load_raw(Stage::Curate)?;
        let (instances, log) = stages::curate(&self.cfg, &raw, spec)?;
        let path = self.path(&files::task(&spec.name, files::INSTANCES));
        fs::create_dir_all(path.parent().expect("task dir"))?;
        write_instances_csv(BufWriter::new(File::create(&path)?), &instances)?;
        write_json(&self.path(&files::task(&spec.name, files::CURATION_LOG)), &log)?;
        Ok(())
    }

    pub fn load_instances(&self, task: &str, consumer: Stage) -> Result<Vec<TteInstance>> {
        let p = self.need(Stage::Curate, Some(task), consumer, files::INSTANCES)?;
        Ok(read_instances_csv(BufReader::new(File::open(p)?))?)
    }

    pub fn load_curation_log(&self, task: &str) -> Result<CurationLog> {
        read_json(&self.need(Stage::Curate, Some(task), Stage::Embed, files::CURATION_LOG)?)
    }

    fn do_embed(&self, spec: &TaskSpec) -> Result<()> {
        let instances = self.load_instances(&spec.name, Stage::Embed)?;
        let params = self.load_encoder(Stage::Embed)?;
        let tokenized = self.load_tokenized(Stage::Embed)?;
        let emb = stages::embed_instances(&params, &tokenized, &instances, self.cfg.head.prompt)?;
        write_json(&self.path(&files::task(&spec.name, files::EMBEDDINGS)), &emb)
    }

    pub fn load_embeddings(&self, task: &str, consumer: Stage) -> Result<Vec<Vec<f64>>> {
        read_json(&self.need(Stage::Embed, Some(task), consumer, files::EMBEDDINGS)?)
    }

    fn do_fit(&self, spec: &TaskSpec) -> Result<()> {
        let instances = self.load_instances(&spec.name, Stage::Fit)?;
        let emb = self.load_embeddings(&spec.name, Stage::Fit)?;
        let raw = self.load_raw(Stage::Fit)?;
        let age_sex = stages::age_sex_features(&raw, &instances)?;
        let fitted = stages::fit_task(&self.cfg.head, spec, &instances, &emb, &age_sex, self.cfg.seed)?;
        write_json(&self.path(&files::task(&spec.name, files::FIT)), &fitted)
    }

    pub fn load_fit(&self, task: &str, consumer: Stage) -> Result<FittedTask> {
        read_json(&self.need(Stage::Fit, Some(task), consumer, files::FIT)?)
    }

    fn do_evaluate(&self, spec: &TaskSpec) -> Result<()> {
        let fitted = self.load_fit(&spec.name, Stage::Evaluate)?;
        let instances = self.load_instances(&spec.name, Stage::Evaluate)?;
        let emb = self.load_embeddings(&spec.name, Stage::Evaluate)?;
        let raw = self.load_raw(Stage::Evaluate)?;
        let age_sex = stages::age_sex_features(&raw, &instances)?;
        let tau = spec.tau_days as f64;
        let s_emb = stages::score_embedding_model(&fitted.model, &emb)?;
        let s_as = stages::score_cox(&fitted.age_sex, &age_sex, tau)?;
        let oracle = stages::oracle_scores(&self.cfg.cohort, &raw, spec, &instances)?;
        let mut models = vec![
            ModelScores {
                name: EMBEDDING_MODEL,
                risk: &s_emb.risk,
                probability: Some(&s_emb.probability),
            },
            ModelScores {
                name: AGE_SEX_MODEL,
                risk: &s_as.risk,
                probability: Some(&s_as.probability),
            },
        ];
        if let Some(o) = &oracle {
            models.push(ModelScores {
                name: ORACLE_MODEL,
                risk: o,
                probability: None,
            });
        }
        let ev = stages::evaluate_task(spec, &instances, &models, self.cfg.head.n_bootstraps, self.cfg.seed)?;
        write_json(&self.path(&files::task(&spec.name, files::EVALUATION)), &ev)
    }

    pub fn load_evaluation(&self, task: &str) -> Result<TaskEvaluation> {
        read_json(&self.need(Stage::Evaluate, Some(task), Stage::Evaluate, files::EVALUATION)?)
    }

    /// Report over every task whose evaluation is available.
    fn emit_report(&self) -> Result<()> {
        let evals: Vec<TaskEvaluation> = self
            .cfg
            .tasks
            .iter()
            .filter_map(|t| self.load_evaluation(&t.name).ok())
            .collect();
        report::emit_report(&evals, &self.path(files::REPORT_DIR))
    }
}

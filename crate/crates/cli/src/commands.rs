//! Retrieval and explanation commands on top of a populated cache directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chronoscope_analysis::{
    attribute_patient, build_index, evaluate_retrieval, knn_query, loto_deltas, risk_trajectory, RetrievalReport,
    SearchIndex, TokenRef,
};
use chronoscope_core::curation::diagnosis_then_medication;
use chronoscope_core::{PatientRecord, TokenKey, Vocabulary};
use chronoscope_encoder::embed_patient;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{files, read_json, write_json, Pipeline, Stage};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredIndex {
    /// Checkpoint hash the rows were computed with.
    encoder_hash: String,
    index: SearchIndex,
}

fn find<'a>(patients: &'a [PatientRecord], id: &str) -> Result<&'a PatientRecord> {
    patients
        .iter()
        .find(|p| p.patient_id == id)
        .ok_or_else(|| CliError::Validation(format!("patient {id} not in cohort")))
}

/// Loads the index at `path`, rebuilding it over the whole tokenized cohort
/// when absent or computed with a different encoder, time or prompt.
pub fn load_or_build_index(pipe: &Pipeline, path: &Path, as_of_min: i64) -> Result<SearchIndex> {
    let params = pipe.load_encoder(Stage::Embed)?;
    let encoder_hash = chronoscope_encoder::checkpoint::content_hash(&params)?;
    let prompt = pipe.cfg.head.prompt;
    if path.exists() {
        let stored: StoredIndex = read_json(path)?;
        if stored.encoder_hash == encoder_hash
            && stored.index.as_of_min == Some(as_of_min)
            && stored.index.prompt == Some(prompt)
        {
            return Ok(stored.index);
        }
    }
    let tokenized = pipe.load_tokenized(Stage::Embed)?;
    let index = build_index(&tokenized, &params, as_of_min, prompt)?;
    write_json(
        path,
        &StoredIndex {
            encoder_hash,
            index: index.clone(),
        },
    )?;
    Ok(index)
}

pub enum Query {
    Patient(String),
    Vector(Vec<f64>),
}

/// Top-`k` patient ids for a stored patient's embedding or an external vector.
/// A patient query never returns the patient itself.
pub fn retrieve(index: &SearchIndex, query: &Query, k: usize) -> Result<Vec<String>> {
    match query {
        Query::Patient(id) => {
            let pos = index
                .position(id)
                .ok_or_else(|| CliError::Validation(format!("patient {id} not in index")))?;
            let row = index.rows[pos].clone();
            let mut ids = knn_query(index, &row, (k + 1).min(index.len()))?;
            ids.retain(|x| x != id);
            ids.truncate(k);
            Ok(ids)
        }
        Query::Vector(v) => Ok(knn_query(index, v, k)?),
    }
}

/// Acc@k of the cohort of patients with `diagnosis` followed by `medication`.
pub fn motif_retrieval(pipe: &Pipeline, index: &SearchIndex, diagnosis: &str, medication: &str, k: usize) -> Result<RetrievalReport> {
    let raw = pipe.load_raw(Stage::Embed)?;
    let cohort = diagnosis_then_medication(&raw, diagnosis, medication, index.as_of_min);
    Ok(evaluate_retrieval(index, &cohort, k, 5, pipe.cfg.seed)?)
}

pub fn token_label(vocab: &Vocabulary, t: &TokenRef) -> String {
    match t {
        TokenRef::Vocab(id) => match vocab.get(*id) {
            Some(e) => match &e.key {
                TokenKey::Code => e.code.clone(),
                TokenKey::Bin(b) => format!("{}#bin{b}", e.code),
                TokenKey::Category(c) => format!("{}={c}", e.code),
            },
            None => format!("token{id}"),
        },
        TokenRef::Unstructured(m) => format!("<{}>", m.name()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainMode {
    Ig,
    Loto,
}

pub struct ExplainRequest<'a> {
    pub task: &'a str,
    pub patient: &'a str,
    pub mode: ExplainMode,
    pub n_steps: usize,
    /// LOTO interval; defaults to one tau before the snapshot.
    pub interval: Option<(i64, i64)>,
    pub out_dir: PathBuf,
}

/// Writes `explain.csv` and `explain.svg` and returns the CSV text.
pub fn explain(pipe: &Pipeline, req: &ExplainRequest<'_>) -> Result<String> {
    let fitted = pipe.load_fit(req.task, Stage::Evaluate)?;
    let params = pipe.load_encoder(Stage::Evaluate)?;
    let instances = pipe.load_instances(req.task, Stage::Evaluate)?;
    let tokenized = pipe.load_tokenized(Stage::Evaluate)?;
    let vocab = Vocabulary::load(pipe.path(files::VOCAB))?;
    let patient = find(&tokenized, req.patient)?;
    let snapshot = instances
        .iter()
        .find(|i| i.patient_id == req.patient)
        .map(|i| i.snapshot_min)
        .ok_or_else(|| CliError::Validation(format!("patient {} has no instance for task {}", req.patient, req.task)))?;
    fs::create_dir_all(&req.out_dir)?;
    let (csv, svg) = match req.mode {
        ExplainMode::Ig => {
            let a = attribute_patient(&params, &fitted.model, patient, snapshot, req.n_steps)?;
            let mut pooled = a.pooled();
            pooled.sort_by(|x, y| y.normalized.total_cmp(&x.normalized).then(x.token.cmp(&y.token)));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["rank", "token", "pooled", "normalized"])?;
            let mut bars = Vec::new();
            for (i, p) in pooled.iter().enumerate() {
                let label = token_label(&vocab, &p.token);
                w.write_record([
                    (i + 1).to_string(),
                    label.clone(),
                    format!("{:.6e}", p.pooled),
                    format!("{:.6}", p.normalized),
                ])?;
                bars.push((label, p.normalized));
            }
            let title = format!(
                "{} {}: attribution (completeness gap {:.2e})",
                req.task, req.patient, a.completeness_gap
            );
            (w.into_inner().map_err(|e| e.into_error())?, bar_svg(&title, &bars))
        }
        ExplainMode::Loto => {
            let tau_min = fitted.model.tau_days as i64 * 1440;
            let (t0, t1) = req.interval.unwrap_or((snapshot - tau_min, snapshot));
            let deltas = loto_deltas(&params, &fitted.model, patient, t0, t1)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["event_index", "time_min", "source_code", "delta"])?;
            for d in &deltas {
                w.write_record([
                    d.event_index.to_string(),
                    d.time_min.to_string(),
                    d.source_code.clone(),
                    format!("{:.6e}", d.delta),
                ])?;
            }
            let grid: Vec<i64> = (0..=20).map(|k| t0 + (t1 - t0) * k / 20).collect();
            let traj = risk_trajectory(&params, &fitted.model, patient, &grid)?;
            let points: Vec<(i64, f64)> = traj.iter().map(|p| (p.as_of_min, p.probability)).collect();
            let title = format!("{} {}: event probability at tau", req.task, req.patient);
            (w.into_inner().map_err(|e| e.into_error())?, trajectory_svg(&title, &points))
        }
    };
    let text = String::from_utf8(csv).expect("csv is utf-8");
    fs::write(req.out_dir.join("explain.csv"), &text)?;
    fs::write(req.out_dir.join("explain.svg"), svg)?;
    Ok(text)
}

/// Embedding of one patient at `as_of_min`, for external vector queries.
pub fn patient_vector(pipe: &Pipeline, id: &str, as_of_min: i64) -> Result<Vec<f64>> {
    let params = pipe.load_encoder(Stage::Embed)?;
    let tokenized = pipe.load_tokenized(Stage::Embed)?;
    Ok(embed_patient(find(&tokenized, id)?, &params, pipe.cfg.head.prompt, as_of_min)?)
}

fn bar_svg(title: &str, bars: &[(String, f64)]) -> String {
    let shown = &bars[..bars.len().min(20)];
    let height = 60.0 + 18.0 * shown.len() as f64;
    let max = shown.iter().map(|(_, v)| v.abs()).fold(0.0_f64, f64::max).max(1e-12);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"640\" height=\"{height:.0}\" fill=\"white\"/>\n<text x=\"320\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    let zero = 420.0;
    for (i, (label, v)) in shown.iter().enumerate() {
        let y = 40.0 + 18.0 * i as f64;
        let w = 180.0 * v.abs() / max;
        let x = if *v >= 0.0 { zero } else { zero - w };
        let color = if *v >= 0.0 { "#c8553d" } else { "#3b6ea8" };
        let _ = writeln!(
            s,
            "<text x=\"230\" y=\"{:.1}\" text-anchor=\"end\">{}</text><rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"14\" fill=\"{color}\"/>",
            y + 11.0,
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trajectory_svg(title: &str, points: &[(i64, f64)]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"640\" height=\"360\" fill=\"white\"/>\n<text x=\"320\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    if let (Some(first), Some(last)) = (points.first(), points.last()) {
        let span = (last.0 - first.0).max(1) as f64;
        let mut d = String::new();
        for (i, (t, p)) in points.iter().enumerate() {
            let x = 50.0 + 540.0 * (t - first.0) as f64 / span;
            let y = 310.0 - 260.0 * p.clamp(0.0, 1.0);
            let _ = write!(d, "{}{x:.1},{y:.1} ", if i == 0 { "M" } else { "L" });
        }
        let _ = writeln!(s, "<path d=\"{}\" fill=\"none\" stroke=\"#c8553d\"/>", d.trim_end());
    }
    s.push_str("</svg>\n");
    s
}

/// Rows of `(metric, value)` for a retrieval report, in a stable order.
pub fn retrieval_summary(r: &RetrievalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("acc_mean".into(), r.mean);
    m.insert("acc_sd".into(), r.sd);
    for (i, f) in r.folds.iter().enumerate() {
        m.insert(format!("fold{i}_acc"), f.accuracy);
        m.insert(format!("fold{i}_p"), f.p_value);
    }
    m
}

//! Integrated Gradients over encoder inputs, population aggregation,
//! leave-one-token-out deltas and risk trajectories.

use std::collections::BTreeMap;

use chronoscope_core::{Modality, PatientRecord, TokenId};
use chronoscope_encoder::model::{content_embedding, PREFIX_LEN};
use chronoscope_encoder::{backward, forward, prompt_input, prompt_window, Content, EncoderParams, SeqInput};
use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, Result};
use crate::task_model::TaskModel;

pub const DEFAULT_STEPS: usize = 64;
pub const L1_EPS: f64 = 1e-12;
pub const DEFAULT_PREVALENCE_FLOOR: f64 = 0.025;

/// `(z - z0) * mean_k grad(z0 + a_k (z - z0))` with midpoints `a_k = (k + 1/2) / n`.
pub fn integrated_gradients<F>(z: &Array2<f64>, z0: &Array2<f64>, n_steps: usize, mut grad: F) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    if z.raw_dim() != z0.raw_dim() || n_steps == 0 {
        return Err(AnalysisError::Shape);
    }
    let diff = z - z0;
    let mut acc = Array2::zeros(z.raw_dim());
    for k in 0..n_steps {
        let a = (k as f64 + 0.5) / n_steps as f64;
        let g = grad(&(z0 + &(&diff * a)))?;
        if g.raw_dim() != z.raw_dim() {
            return Err(AnalysisError::Shape);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFiniteGradient);
        }
        acc += &g;
    }
    Ok(diff * &acc / n_steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    /// One row per attributed event, in input order.
    pub attributions: Array2<f64>,
    pub score: f64,
    pub baseline_score: f64,
}

impl IgResult {
    /// Net attribution per event (sum over embedding dimensions).
    pub fn net(&self) -> Vec<f64> {
        self.attributions.sum_axis(Axis(1)).to_vec()
    }

    /// `|sum IG - (s(Z) - s(Z0))| / max(|s(Z) - s(Z0)|, 1e-8)`.
    pub fn completeness_gap(&self) -> f64 {
        let delta = self.score - self.baseline_score;
        (self.attributions.sum() - delta).abs() / delta.abs().max(1e-8)
    }
}

fn with_contents(input: &SeqInput, rows: &Array2<f64>) -> SeqInput {
    let mut x = input.clone();
    for (i, row) in rows.rows().into_iter().enumerate() {
        x.items[i].content = Content::Raw(row.to_vec());
    }
    x
}

fn score_of(params: &EncoderParams, input: &SeqInput, w: &[f64]) -> Result<f64> {
    let tape = forward(params, input)?;
    let h = tape.hidden.row(tape.hidden.nrows() - 1);
    Ok(h.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// IG of `w . h_prompt` with respect to the content embeddings of the first
/// `n_events` items. Structured items start from the mean embedding-table row
/// and unstructured items from zero; time encodings, the prefix and the prompt
/// are held fixed.
pub fn encoder_ig(params: &EncoderParams, input: &SeqInput, n_events: usize, w: &[f64], n_steps: usize) -> Result<IgResult> {
    let e = params.config.embed_dim;
    if w.len() != e {
        return Err(AnalysisError::Dimension {
            expected: e,
            found: w.len(),
        });
    }
    if n_events > input.items.len() {
        return Err(AnalysisError::Shape);
    }
    let table = params.t(params.layout.w_emb);
    let mean_row = table.mean_axis(Axis(0)).expect("non-empty vocabulary");
    let mut z = Array2::zeros((n_events, e));
    let mut z0 = Array2::zeros((n_events, e));
    for i in 0..n_events {
        let c = &input.items[i].content;
        z.row_mut(i).assign(&ndarray::ArrayView1::from(&content_embedding(params, c)[..]));
        if matches!(c, Content::Token(_) | Content::MaskStruct(_)) {
            z0.row_mut(i).assign(&mean_row);
        }
    }
    let mut g = params.zeros_like();
    let n = input.len();
    let grad = |rows: &Array2<f64>| -> Result<Array2<f64>> {
        let x = with_contents(input, rows);
        let tape = forward(params, &x)?;
        let mut dh = Array2::zeros((n, e));
        dh.row_mut(n - 1).assign(&ndarray::ArrayView1::from(w));
        let dx = backward(params, &x, &tape, &dh, &mut g);
        Ok(dx.slice(s![PREFIX_LEN..PREFIX_LEN + n_events, ..]).to_owned())
    };
    let attributions = integrated_gradients(&z, &z0, n_steps, grad)?;
    Ok(IgResult {
        attributions,
        score: score_of(params, &with_contents(input, &z), w)?,
        baseline_score: score_of(params, &with_contents(input, &z0), w)?,
    })
}

/// Token identity for aggregation: structured events by vocabulary id,
/// unstructured events by modality.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenRef {
    Vocab(TokenId),
    Unstructured(Modality),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub token: TokenRef,
    pub source_code: String,
    pub time_min: i64,
    /// Net attribution `a_t`.
    pub net: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientAttribution {
    pub patient_id: String,
    pub records: Vec<AttributionRecord>,
    pub score: f64,
    pub baseline_score: f64,
    pub completeness_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub token: TokenRef,
    /// Max-pooled `A_{p,v}`.
    pub pooled: f64,
    /// `A_{p,v} / (sum_u |A_{p,u}| + eps)`.
    pub normalized: f64,
}

impl PatientAttribution {
    pub fn pooled(&self) -> Vec<PooledScore> {
        let mut m: BTreeMap<TokenRef, f64> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.token.clone()).and_modify(|a| *a = a.max(r.net)).or_insert(r.net);
        }
        let l1: f64 = m.values().map(|a| a.abs()).sum();
        m.into_iter()
            .map(|(token, pooled)| PooledScore {
                token,
                pooled,
                normalized: pooled / (l1 + L1_EPS),
            })
            .collect()
    }
}

/// Attributes the task score at `as_of_min` to the events in the encoder window.
pub fn attribute_patient(
    params: &EncoderParams,
    model: &TaskModel,
    patient: &PatientRecord,
    as_of_min: i64,
    n_steps: usize,
) -> Result<PatientAttribution> {
    let events = prompt_window(patient, params.config.max_seq, as_of_min);
    let input = prompt_input(patient, params, model.prompt, as_of_min)?;
    let w = model.score_direction();
    let ig = encoder_ig(params, &input, events.len(), &w, n_steps)?;
    let records = events
        .iter()
        .zip(ig.net())
        .map(|(e, net)| AttributionRecord {
            token: match e.token() {
                Some(t) => TokenRef::Vocab(t),
                None => TokenRef::Unstructured(e.modality),
            },
            source_code: e.source_code.clone(),
            time_min: e.time_min,
            net,
        })
        .collect();
    // The affine PCA/Cox offset cancels in the difference; report on the risk scale.
    let offset = model.risk_of_embedding(&vec![0.0; w.len()])?;
    Ok(PatientAttribution {
        patient_id: patient.patient_id.clone(),
        records,
        score: ig.score + offset,
        baseline_score: ig.baseline_score + offset,
        completeness_gap: ig.completeness_gap(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationImportance {
    pub token: TokenRef,
    /// Mean normalized score over patients possessing the token.
    pub mean_score: f64,
    pub n_patients: usize,
    pub prevalence_events: f64,
    pub prevalence_censored: f64,
}

/// Indices of the top quartile by risk (ties broken by index).
pub fn top_quartile(risks: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| risks[b].total_cmp(&risks[a]).then(a.cmp(&b)));
    order.truncate(risks.len().div_ceil(4));
    order.sort_unstable();
    order
}

/// Ranks tokens by their mean normalized attribution over the patients that
/// carry them, keeping tokens present in at least `floor` of either the event
/// or the censored patients.
pub fn aggregate_attributions(
    patients: &[PatientAttribution],
    is_event: &[bool],
    floor: f64,
) -> Result<Vec<PopulationImportance>> {
    if patients.is_empty() {
        return Err(AnalysisError::EmptyHighRisk);
    }
    if patients.len() != is_event.len() {
        return Err(AnalysisError::Shape);
    }
    let n_ev = is_event.iter().filter(|&&e| e).count();
    let n_cens = is_event.len() - n_ev;
    // token -> (sum normalized, n, n_event_patients, n_censored_patients)
    let mut acc: BTreeMap<TokenRef, (f64, usize, usize, usize)> = BTreeMap::new();
    for (p, &ev) in patients.iter().zip(is_event) {
        for s in p.pooled() {
            let a = acc.entry(s.token).or_insert((0.0, 0, 0, 0));
            a.0 += s.normalized;
            a.1 += 1;
            if ev {
                a.2 += 1;
            } else {
                a.3 += 1;
            }
        }
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let mut out: Vec<PopulationImportance> = acc
        .into_iter()
        .map(|(token, (sum, n, ke, kc))| PopulationImportance {
            token,
            mean_score: sum / n as f64,
            n_patients: n,
            prevalence_events: frac(ke, n_ev),
            prevalence_censored: frac(kc, n_cens),
        })
        .filter(|v| v.prevalence_events >= floor || v.prevalence_censored >= floor)
        .collect();
    out.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then_with(|| a.token.cmp(&b.token)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotoDelta {
    /// Index into the patient's event list.
    pub event_index: usize,
    pub time_min: i64,
    pub source_code: String,
    /// `risk(full) - risk(without this event)` at `t1`.
    pub delta: f64,
}

/// Leave-one-token-out risk changes for each event in `(t0, t1]`, evaluated at `t1`.
pub fn loto_deltas(
    params: &EncoderParams,
    model: &TaskModel,
    patient: &PatientRecord,
    t0: i64,
    t1: i64,
) -> Result<Vec<LotoDelta>> {
    loto_deltas_with(patient, t0, t1, |p| model.risk(params, p, t1))
}

/// [`loto_deltas`] for an arbitrary risk function of the record.
pub fn loto_deltas_with<F>(patient: &PatientRecord, t0: i64, t1: i64, risk: F) -> Result<Vec<LotoDelta>>
where
    F: Fn(&PatientRecord) -> Result<f64> + Sync,
{
    let idx: Vec<usize> = (0..patient.events.len())
        .filter(|&i| patient.events[i].time_min > t0 && patient.events[i].time_min <= t1)
        .collect();
    if idx.is_empty() {
        return Err(AnalysisError::EmptyInterval { t0, t1 });
    }
    let full = risk(patient)?;
    idx.par_iter()
        .map(|&i| {
            let mut q = patient.clone();
            let e = q.events.remove(i);
            Ok(LotoDelta {
                event_index: i,
                time_min: e.time_min,
                source_code: e.source_code,
                delta: full - risk(&q)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub as_of_min: i64,
    pub risk: f64,
    pub probability: f64,
    /// Event times since the previous grid point (encounter markers).
    pub new_event_times: Vec<i64>,
}

/// Event probability at the model horizon, re-evaluated at each `as_of` on `grid`.
pub fn risk_trajectory(
    params: &EncoderParams,
    model: &TaskModel,
    patient: &PatientRecord,
    grid: &[i64],
) -> Result<Vec<TrajectoryPoint>> {
    let mut prev = i64::MIN;
    grid.iter()
        .map(|&t| {
            let h = chronoscope_encoder::embed_patient(patient, params, model.prompt, t)?;
            let x = model.features(&h)?;
            let new_event_times = patient
                .events
                .iter()
                .filter(|e| e.time_min > prev && e.time_min <= t)
                .map(|e| e.time_min)
                .collect();
            prev = t;
            Ok(TrajectoryPoint {
                as_of_min: t,
                risk: model.cox.predict_risk(&x)?,
                probability: model.cox.event_probability(&x, model.tau_days)?,
                new_event_times,
            })
        })
        .collect()
}

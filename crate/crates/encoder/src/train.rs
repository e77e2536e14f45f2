//! Masked-reconstruction pretraining: AdamW with decoupled weight decay,
//! global-norm clipping, two learning-rate groups and warmup-cosine schedule.

use chronoscope_core::domain::seeded_hash;
use chronoscope_core::{PatientRecord, Vocabulary};
use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::error::{EncoderError, Result};
use crate::loss::{apply_masking, losses, DecodeTable, LossParts, MaskedBatch, Target};
use crate::model::forward;
use crate::params::{EncoderParams, Grads, LrGroup};
use crate::sequence::{build_input, canonical_order};

/// Learning-rate multiplier in `[0, 1]` after `step` optimizer steps: linear
/// warmup to 1 at `warmup`, then cosine decay reaching 0 at `total`.
pub fn lr_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        if warmup == 0 {
            1.0
        } else {
            step as f64 / warmup as f64
        }
    } else if step >= total {
        0.0
    } else {
        let frac = (step - warmup) as f64 / (total - warmup) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

pub struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(p: &EncoderParams) -> Self {
        let z = p.zeros_like().tensors;
        AdamW {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    /// One update with rate `factor * lr_group`; decay applies only to tensors
    /// flagged as matrices.
    pub fn step(&mut self, p: &mut EncoderParams, g: &Grads, factor: f64) {
        let cfg = p.config.clone();
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, meta) in p.meta.iter().enumerate() {
            let lr = factor
                * match meta.group {
                    LrGroup::Base => cfg.lr_base,
                    LrGroup::Heads => cfg.lr_heads,
                };
            let wd = if meta.decay { cfg.weight_decay } else { 0.0 };
            Zip::from(&mut p.tensors[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&g.tensors[i])
                .for_each(|w, m, v, &gr| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + wd * *w);
                });
        }
    }
}

/// Scales `g` so its global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let n = g.global_norm();
    if n > max_norm {
        g.scale(max_norm / n);
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iter: usize,
    pub l_struct: f64,
    pub l_unstruct: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss (sum of present terms) per iteration.
    pub train_loss: Vec<f64>,
    pub val: Vec<ValPoint>,
    pub best: Option<ValPoint>,
    /// Mean restricted-vocabulary size over masked structured validation targets.
    pub mean_restricted_vocab: f64,
}

/// Prepares a tokenized record for training: canonical event order.
fn prepared(p: &PatientRecord) -> PatientRecord {
    let mut q = p.clone();
    q.events = canonical_order(&p.events);
    q
}

/// A window of at most `max_seq` events; `start = None` takes the most recent.
fn window_batch<R: Rng>(
    p: &PatientRecord,
    start: Option<usize>,
    cfg: &EncoderConfig,
    table: &DecodeTable,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let n = p.events.len();
    let len = n.min(cfg.max_seq);
    let s = start.unwrap_or(n - len).min(n - len);
    let ev = &p.events[s..s + len];
    let age = ev.last().map_or(0, |e| e.time_min);
    let input = build_input(p, ev, age, cfg)?;
    Ok(apply_masking(&input, table, rng, cfg.mask_ratio))
}

/// Deterministically masked validation batches (most recent window).
pub fn validation_batches(val: &[PatientRecord], cfg: &EncoderConfig, table: &DecodeTable) -> Result<Vec<MaskedBatch>> {
    let n = if cfg.val_patients == 0 {
        val.len()
    } else {
        cfg.val_patients.min(val.len())
    };
    val[..n]
        .iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(&p.patient_id, cfg.seed ^ 0x5eed));
            window_batch(&prepared(p), None, cfg, table, &mut rng)
        })
        .collect()
}

pub fn evaluate(p: &EncoderParams, table: &DecodeTable, batches: &[MaskedBatch]) -> Result<LossParts> {
    let parts = batches
        .par_iter()
        .map(|b| {
            let tape = forward(p, &b.input)?;
            losses(p, table, b, &tape, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossParts::default();
    for x in &parts {
        total.add(x);
    }
    Ok(total)
}

fn val_point(iter: usize, parts: &LossParts) -> ValPoint {
    ValPoint {
        iter,
        l_struct: parts.l_struct().unwrap_or(0.0),
        l_unstruct: parts.l_unstruct().unwrap_or(0.0),
        total: parts.total(),
    }
}

/// Loss and gradient for one optimizer step over `batches`.
pub fn batch_gradient(p: &EncoderParams, table: &DecodeTable, batches: &[MaskedBatch]) -> Result<(LossParts, Grads)> {
    let n_struct: usize = batches.iter().map(|b| b.n_struct()).sum();
    let n_dense: usize = batches.iter().map(|b| b.n_dense()).sum();
    let ws = if n_struct > 0 { 1.0 / n_struct as f64 } else { 0.0 };
    let wd = if n_dense > 0 { 1.0 / n_dense as f64 } else { 0.0 };
    let per = batches
        .par_iter()
        .map(|b| {
            let mut g = p.zeros_like();
            let tape = forward(p, &b.input)?;
            let parts = losses(p, table, b, &tape, Some((&mut g, ws, wd)))?;
            Ok((parts, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = LossParts::default();
    let mut grads = p.zeros_like();
    for (lp, g) in &per {
        parts.add(lp);
        grads.add_assign(g);
    }
    Ok((parts, grads))
}

/// Pretrains from a fresh initialization. Returns the best-validation
/// parameters (or the final ones when `val` is empty) and the loss curves.
pub fn pretrain(
    train: &[PatientRecord],
    val: &[PatientRecord],
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<(EncoderParams, TrainReport)> {
    let mut params = EncoderParams::init(cfg, vocab.len())?;
    let table = DecodeTable::new(vocab);
    let train: Vec<PatientRecord> = train.iter().filter(|p| !p.events.is_empty()).map(prepared).collect();
    let val_batches = validation_batches(val, cfg, &table)?;
    let mut report = TrainReport::default();
    let sizes: Vec<usize> = val_batches
        .iter()
        .flat_map(|b| &b.targets)
        .filter_map(|t| match t {
            Target::Struct { token, .. } => Some(table.group_size(*token)),
            Target::Dense { .. } => None,
        })
        .collect();
    if !sizes.is_empty() {
        report.mean_restricted_vocab = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    }
    if cfg.total_iters == 0 || train.is_empty() {
        return Ok((params, report));
    }

    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash("pretrain", cfg.seed));
    let mut best: Option<(ValPoint, Vec<Array2<f64>>)> = None;
    let mut check_val = |iter: usize, params: &EncoderParams, report: &mut TrainReport| -> Result<()> {
        if val_batches.is_empty() {
            return Ok(());
        }
        let vp = val_point(iter, &evaluate(params, &table, &val_batches)?);
        if !vp.total.is_finite() {
            return Err(EncoderError::Divergence { iter });
        }
        if best.as_ref().is_none_or(|(b, _)| vp.total < b.total) {
            best = Some((vp.clone(), params.tensors.clone()));
        }
        report.val.push(vp);
        Ok(())
    };
    check_val(0, &params, &mut report)?;
    for iter in 0..cfg.total_iters {
        let mut batches = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = &train[rng.random_range(0..train.len())];
            let span = p.events.len().saturating_sub(cfg.max_seq);
            let start = rng.random_range(0..=span);
            let mut mrng = ChaCha8Rng::seed_from_u64(rng.random());
            batches.push(window_batch(p, Some(start), cfg, &table, &mut mrng)?);
        }
        let (parts, mut grads) = batch_gradient(&params, &table, &batches)?;
        let loss = parts.total();
        if !loss.is_finite() {
            return Err(EncoderError::Divergence { iter });
        }
        report.train_loss.push(loss);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut params, &grads, lr_factor(iter + 1, cfg.warmup_iters, cfg.total_iters));
        if !params.all_finite() {
            return Err(EncoderError::Divergence { iter });
        }
        let done = iter + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.total_iters {
            check_val(done, &params, &mut report)?;
        }
    }
    if let Some((vp, tensors)) = best {
        params.tensors = tensors;
        report.best = Some(vp);
    }
    Ok((params, report))
}

//! Masking and the two reconstruction objectives.

use chronoscope_core::{Modality, TokenId, Vocabulary};
use ndarray::Array2;
use rand::Rng;

use crate::config::struct_slot;
use crate::error::{EncoderError, Result};
use crate::model::{backward, Content, SeqInput, Tape, PREFIX_LEN};
use crate::params::{EncoderParams, Grads};

/// Restricted decoding vocabularies: one group per structured modality, split
/// further by subdomain class for measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTable {
    pub groups: Vec<Vec<TokenId>>,
    /// Group index and position within the group, per token id.
    pub group_of: Vec<(usize, usize)>,
    /// Mask slot of each token's modality.
    pub mask_slot: Vec<usize>,
    pub modality: Vec<Modality>,
}

impl DecodeTable {
    pub fn new(vocab: &Vocabulary) -> Self {
        let groups: Vec<Vec<TokenId>> = vocab.decode_groups().into_values().collect();
        let mut group_of = vec![(0, 0); vocab.len()];
        for (g, ids) in groups.iter().enumerate() {
            for (j, &t) in ids.iter().enumerate() {
                group_of[t as usize] = (g, j);
            }
        }
        let modality: Vec<Modality> = vocab.entries().iter().map(|e| e.modality).collect();
        let mask_slot = modality.iter().map(|m| struct_slot(*m).unwrap_or(0)).collect();
        DecodeTable {
            groups,
            group_of,
            mask_slot,
            modality,
        }
    }

    pub fn group_size(&self, token: TokenId) -> usize {
        self.groups[self.group_of[token as usize].0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Struct { pos: usize, token: TokenId },
    Dense { pos: usize, slot: usize, x: Vec<f64> },
}

/// A sequence with masked inputs and the reconstruction targets. Positions
/// count from the start of the sequence, prefix included.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input: SeqInput,
    pub targets: Vec<Target>,
}

impl MaskedBatch {
    pub fn n_struct(&self) -> usize {
        self.targets.iter().filter(|t| matches!(t, Target::Struct { .. })).count()
    }

    pub fn n_dense(&self) -> usize {
        self.targets.len() - self.n_struct()
    }
}

/// Masks each event independently with probability `rho`. A masked input
/// becomes its type's mask vector; the time encoding is kept.
pub fn apply_masking<R: Rng>(seq: &SeqInput, table: &DecodeTable, rng: &mut R, rho: f64) -> MaskedBatch {
    let mut input = seq.clone();
    let mut targets = Vec::new();
    for (i, it) in input.items.iter_mut().enumerate() {
        if !rng.random_bool(rho) {
            continue;
        }
        let pos = PREFIX_LEN + i;
        match &it.content {
            Content::Token(t) => {
                targets.push(Target::Struct { pos, token: *t });
                it.content = Content::MaskStruct(table.mask_slot[*t as usize]);
            }
            Content::Dense { slot, x } => {
                targets.push(Target::Dense {
                    pos,
                    slot: *slot,
                    x: x.clone(),
                });
                it.content = Content::MaskDense(*slot);
            }
            _ => {}
        }
    }
    MaskedBatch { input, targets }
}

/// Cross-entropy of `logits` against index `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[target]
}

/// `(1/d)‖x̂ − x‖² + 1 − cos(x̂, x)`.
pub fn reconstruction_loss(xhat: &[f64], x: &[f64]) -> Result<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 {
        return Err(EncoderError::DegenerateTarget);
    }
    let nh = xhat.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let dot: f64 = xhat.iter().zip(x).map(|(a, b)| a * b).sum();
    let mse: f64 = xhat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(mse + 1.0 - dot / (nh * nx))
}

/// Restricted-vocabulary logits for a hidden state: `h · W_emb[v]` over the group.
pub fn group_logits(p: &EncoderParams, table: &DecodeTable, h: ndarray::ArrayView1<f64>, group: usize) -> Vec<f64> {
    let w = p.t(p.layout.w_emb);
    table.groups[group].iter().map(|&v| w.row(v as usize).dot(&h)).collect()
}

pub fn dense_prediction(p: &EncoderParams, h: ndarray::ArrayView1<f64>, slot: usize) -> Vec<f64> {
    let w = p.t(p.layout.head_w[slot]);
    let b = p.t(p.layout.head_b[slot]);
    (h.dot(w) + b.row(0)).to_vec()
}

/// Summed losses and counts for one masked sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub struct_sum: f64,
    pub n_struct: usize,
    pub dense_sum: f64,
    pub n_dense: usize,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.struct_sum += o.struct_sum;
        self.n_struct += o.n_struct;
        self.dense_sum += o.dense_sum;
        self.n_dense += o.n_dense;
    }

    /// Mean structured loss, or `None` when no structured position was masked.
    pub fn l_struct(&self) -> Option<f64> {
        (self.n_struct > 0).then(|| self.struct_sum / self.n_struct as f64)
    }

    pub fn l_unstruct(&self) -> Option<f64> {
        (self.n_dense > 0).then(|| self.dense_sum / self.n_dense as f64)
    }

    /// Sum of the present terms; an absent term contributes nothing.
    pub fn total(&self) -> f64 {
        self.l_struct().unwrap_or(0.0) + self.l_unstruct().unwrap_or(0.0)
    }
}

/// Evaluates both losses on a forward tape. When `grads` is given, the summed
/// structured loss is scaled by `w_struct` and the summed unstructured loss by
/// `w_dense` before differentiating.
pub fn losses(
    p: &EncoderParams,
    table: &DecodeTable,
    batch: &MaskedBatch,
    tape: &Tape,
    grads: Option<(&mut Grads, f64, f64)>,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    let e = p.config.embed_dim;
    let mut d_hidden = Array2::<f64>::zeros((tape.hidden.nrows(), e));
    let mut grads = grads;
    let (w_struct, w_dense) = grads.as_ref().map_or((0.0, 0.0), |g| (g.1, g.2));
    let l = &p.layout;
    for t in &batch.targets {
        match t {
            Target::Struct { pos, token } => {
                let h = tape.hidden.row(*pos);
                let (g, j) = table.group_of[*token as usize];
                let logits = group_logits(p, table, h, g);
                parts.struct_sum += cross_entropy(&logits, j);
                parts.n_struct += 1;
                if let Some((gr, _, _)) = grads.as_mut() {
                    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    let w = p.t(p.layout.w_emb);
                    let mut dh = d_hidden.row_mut(*pos);
                    for (k, (&v, lg)) in table.groups[g].iter().zip(&logits).enumerate() {
                        let mut dl = (lg - m).exp() / z;
                        if k == j {
                            dl -= 1.0;
                        }
                        dl *= w_struct;
                        dh.scaled_add(dl, &w.row(v as usize));
                        gr.tensors[l.w_emb].row_mut(v as usize).scaled_add(dl, &h);
                    }
                }
            }
            Target::Dense { pos, slot, x } => {
                let h = tape.hidden.row(*pos);
                let xhat = dense_prediction(p, h, *slot);
                parts.dense_sum += reconstruction_loss(&xhat, x)?;
                parts.n_dense += 1;
                if let Some((gr, _, _)) = grads.as_mut() {
                    let d = x.len() as f64;
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nh = xhat.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    let dot: f64 = xhat.iter().zip(x).map(|(a, b)| a * b).sum();
                    let cos = dot / (nh * nx);
                    let dxhat: Vec<f64> = xhat
                        .iter()
                        .zip(x)
                        .map(|(&a, &b)| w_dense * (2.0 * (a - b) / d - (b / (nh * nx) - cos * a / (nh * nh))))
                        .collect();
                    let wh = p.t(p.layout.head_w[*slot]);
                    let dxv = ndarray::ArrayView1::from(&dxhat[..]);
                    let mut dh = d_hidden.row_mut(*pos);
                    dh += &wh.dot(&dxv);
                    for (i, &hi) in h.iter().enumerate() {
                        gr.tensors[l.head_w[*slot]].row_mut(i).scaled_add(hi, &dxv);
                    }
                    let mut r = gr.tensors[l.head_b[*slot]].row_mut(0);
                    r += &dxv;
                }
            }
        }
    }
    if let Some((g, _, _)) = grads {
        backward(p, &batch.input, tape, &d_hidden, g);
    }
    Ok(parts)
}

//! Central-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{losses, DecodeTable, MaskedBatch};
use crate::model::forward;
use crate::params::EncoderParams;

/// Denominators below this floor are clamped, so entries whose true gradient
/// is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub groups: Vec<GroupError>,
}

fn objective(p: &EncoderParams, table: &DecodeTable, batch: &MaskedBatch) -> Result<f64> {
    let tape = forward(p, &batch.input)?;
    Ok(losses(p, table, batch, &tape, None)?.total())
}

/// Compares every parameter's analytic derivative of `L_struct + L_unstruct`
/// against the sixth-order central difference
/// `(45 Δ1 − 9 Δ2 + Δ3) / 60h` with `Δk = L(θ+kh) − L(θ−kh)`.
pub fn gradient_check(p: &EncoderParams, table: &DecodeTable, batch: &MaskedBatch, h: f64) -> Result<GradCheckReport> {
    let mut g = p.zeros_like();
    let tape = forward(p, &batch.input)?;
    let ws = 1.0 / batch.n_struct().max(1) as f64;
    let wd = 1.0 / batch.n_dense().max(1) as f64;
    losses(p, table, batch, &tape, Some((&mut g, ws, wd)))?;
    let mut q = p.clone();
    let mut groups = Vec::with_capacity(p.tensors.len());
    let mut n_checked = 0;
    for (i, meta) in p.meta.iter().enumerate() {
        let mut ge = GroupError {
            name: meta.name.clone(),
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for idx in 0..p.tensors[i].len() {
            let (r, c) = (idx / meta.cols, idx % meta.cols);
            let orig = q.tensors[i][[r, c]];
            let mut at = |delta: f64| -> Result<f64> {
                q.tensors[i][[r, c]] = orig + delta;
                objective(&q, table, batch)
            };
            let d1 = at(h)? - at(-h)?;
            let d2 = at(2.0 * h)? - at(-2.0 * h)?;
            let d3 = at(3.0 * h)? - at(-3.0 * h)?;
            let num = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h);
            q.tensors[i][[r, c]] = orig;
            let ana = g.tensors[i][[r, c]];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(REL_FLOOR);
            ge.max_rel_err = ge.max_rel_err.max(rel);
            ge.max_abs_grad = ge.max_abs_grad.max(ana.abs());
            n_checked += 1;
        }
        groups.push(ge);
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        n_checked,
        groups,
    })
}

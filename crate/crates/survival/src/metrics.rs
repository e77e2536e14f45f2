//! Time-to-event evaluation metrics at a horizon `tau`, weighted by the
//! censoring survival curve `G`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvivalError};
use crate::km::{kaplan_meier, KmCurve, KmTarget};

fn check(n: usize, durations: &[f64], events: &[bool]) -> Result<()> {
    if n != durations.len() {
        return Err(SurvivalError::LengthMismatch(n, durations.len()));
    }
    if events.len() != durations.len() {
        return Err(SurvivalError::LengthMismatch(events.len(), durations.len()));
    }
    if n == 0 {
        return Err(SurvivalError::Empty);
    }
    Ok(())
}

/// Kaplan–Meier curve of censoring times.
pub fn censoring_curve(durations: &[f64], events: &[bool]) -> Result<KmCurve> {
    kaplan_meier(durations, events, KmTarget::Censoring)
}

fn pair_score(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    /// Cases dropped because `G(T-)` was zero.
    pub n_excluded: usize,
}

/// Cumulative/dynamic AUC: cases `T <= tau` with an event weighted `1/G(T-)`,
/// controls `T > tau` weighted `1/G(tau)`; risk ties count one half.
pub fn cumulative_dynamic_auc(
    risks: &[f64],
    durations: &[f64],
    events: &[bool],
    tau: f64,
    g: &KmCurve,
) -> Result<AucResult> {
    check(risks.len(), durations, events)?;
    let mut controls: Vec<f64> = (0..risks.len()).filter(|&i| durations[i] > tau).map(|i| risks[i]).collect();
    if controls.is_empty() {
        return Err(SurvivalError::Undefined("no controls beyond tau".into()));
    }
    if g.at(tau) <= 0.0 {
        return Err(SurvivalError::ZeroCensoringSurvival(tau));
    }
    controls.sort_by(f64::total_cmp);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut n_cases = 0;
    let mut n_excluded = 0;
    for i in 0..risks.len() {
        if !(events[i] && durations[i] <= tau) {
            continue;
        }
        let gi = g.left_limit(durations[i]);
        if gi <= 0.0 {
            n_excluded += 1;
            continue;
        }
        n_cases += 1;
        let w = 1.0 / gi;
        let below = controls.partition_point(|&c| c < risks[i]);
        let not_above = controls.partition_point(|&c| c <= risks[i]);
        num += w * (below as f64 + 0.5 * (not_above - below) as f64);
        den += w * controls.len() as f64;
    }
    if n_cases == 0 {
        return Err(SurvivalError::Undefined("no cases by tau".into()));
    }
    // The constant control weight 1/G(tau) cancels.
    Ok(AucResult {
        auc: num / den,
        n_excluded,
    })
}

/// Uno's concordance truncated at `tau`: pairs with `T_i < T_j`, `T_i < tau`,
/// an event at `T_i`, weighted `G(T_i-)^-2`.
pub fn uno_c_index(risks: &[f64], durations: &[f64], events: &[bool], tau: f64, g: &KmCurve) -> Result<f64> {
    check(risks.len(), durations, events)?;
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if !events[i] || durations[i] >= tau {
            continue;
        }
        let gi = g.left_limit(durations[i]);
        if gi <= 0.0 {
            return Err(SurvivalError::ZeroCensoringSurvival(durations[i]));
        }
        let w = 1.0 / (gi * gi);
        for &j in &order[k + 1..] {
            if durations[j] > durations[i] {
                num += w * pair_score(risks[i], risks[j]);
                den += w;
            }
        }
    }
    if den == 0.0 {
        return Err(SurvivalError::Undefined("no comparable pairs".into()));
    }
    Ok(num / den)
}

/// Inverse-probability-of-censoring weight at `tau`; zero when censored by `tau`.
pub fn ipcw_weight(duration: f64, event: bool, tau: f64, g: &KmCurve) -> Result<f64> {
    if duration > tau {
        let gt = g.at(tau);
        if gt <= 0.0 {
            return Err(SurvivalError::ZeroCensoringSurvival(tau));
        }
        Ok(1.0 / gt)
    } else if event {
        let gt = g.left_limit(duration);
        if gt <= 0.0 {
            return Err(SurvivalError::ZeroCensoringSurvival(duration));
        }
        Ok(1.0 / gt)
    } else {
        Ok(0.0)
    }
}

/// `(1/n) sum w_i (Y_i - p_i)^2` with `Y_i = 1{T_i <= tau, event}`.
pub fn ipcw_brier(probs: &[f64], durations: &[f64], events: &[bool], tau: f64, g: &KmCurve) -> Result<f64> {
    check(probs.len(), durations, events)?;
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SurvivalError::Undefined(format!("probability {p} outside [0, 1]")));
    }
    let mut total = 0.0;
    for i in 0..probs.len() {
        let w = ipcw_weight(durations[i], events[i], tau, g)?;
        let y = f64::from(u8::from(events[i] && durations[i] <= tau));
        total += w * (y - probs[i]).powi(2);
    }
    Ok(total / probs.len() as f64)
}

/// Label at `tau`: `Some(true)` for an event by `tau`, `Some(false)` when
/// event-free through `tau`, `None` when censored before `tau`.
pub fn label_at(duration: f64, event: bool, tau: f64) -> Option<bool> {
    if event && duration <= tau {
        Some(true)
    } else if duration >= tau {
        Some(false)
    } else {
        None
    }
}

fn labelled(risks: &[f64], durations: &[f64], events: &[bool], tau: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    check(risks.len(), durations, events)?;
    let mut r = Vec::new();
    let mut y = Vec::new();
    for i in 0..risks.len() {
        if let Some(l) = label_at(durations[i], events[i], tau) {
            r.push(risks[i]);
            y.push(l);
        }
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(SurvivalError::Undefined("single class after removing early censoring".into()));
    }
    Ok((r, y))
}

/// Mean of sensitivity and specificity for `risk >= threshold`.
pub fn balanced_accuracy_at(risks: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&r, &y) in risks.iter().zip(labels) {
        let hat = r >= threshold;
        if y {
            p += 1;
            tp += usize::from(hat);
        } else {
            n += 1;
            tn += usize::from(!hat);
        }
    }
    0.5 * (tp as f64 / p as f64 + tn as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub threshold: f64,
    pub validation: f64,
    pub test: f64,
}

/// Picks the validation risk value maximizing balanced accuracy (smallest on
/// ties) and scores the test set at that threshold.
#[allow(clippy::too_many_arguments)]
pub fn balanced_accuracy(
    risks_val: &[f64],
    durations_val: &[f64],
    events_val: &[bool],
    risks_test: &[f64],
    durations_test: &[f64],
    events_test: &[bool],
    tau: f64,
) -> Result<BalancedAccuracy> {
    let (rv, yv) = labelled(risks_val, durations_val, events_val, tau)?;
    let (rt, yt) = labelled(risks_test, durations_test, events_test, tau)?;
    let mut cand = rv.clone();
    cand.sort_by(f64::total_cmp);
    cand.dedup();
    let mut best = (f64::NEG_INFINITY, cand[0]);
    for &thr in &cand {
        let ba = balanced_accuracy_at(&rv, &yv, thr);
        if ba > best.0 {
            best = (ba, thr);
        }
    }
    Ok(BalancedAccuracy {
        threshold: best.1,
        validation: best.0,
        test: balanced_accuracy_at(&rt, &yt, best.1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub n: usize,
    pub mean_predicted: f64,
    pub observed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ici: f64,
    pub mce: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Rank-based bins of equal size (stable on ties); per bin the mean predicted
/// probability is compared with the Kaplan–Meier event probability at `tau`.
pub fn calibration_indices(
    probs: &[f64],
    durations: &[f64],
    events: &[bool],
    tau: f64,
    n_bins: usize,
) -> Result<Calibration> {
    check(probs.len(), durations, events)?;
    let n = probs.len();
    if n_bins == 0 || n < n_bins {
        return Err(SurvivalError::Undefined(format!("{n} instances for {n_bins} bins")));
    }
    if probs.iter().all(|&p| p == probs[0]) {
        return Err(SurvivalError::Undefined("constant predicted risk".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let members = &order[b * n / n_bins..(b + 1) * n / n_bins];
        if members.iter().all(|&i| !events[i] && durations[i] < tau) {
            return Err(SurvivalError::Undefined(format!("bin {b} has no information at tau")));
        }
        let t: Vec<f64> = members.iter().map(|&i| durations[i]).collect();
        let e: Vec<bool> = members.iter().map(|&i| events[i]).collect();
        let km = kaplan_meier(&t, &e, KmTarget::Event)?;
        bins.push(CalibrationBin {
            n: members.len(),
            mean_predicted: members.iter().map(|&i| probs[i]).sum::<f64>() / members.len() as f64,
            observed: 1.0 - km.at(tau),
        });
    }
    let diffs: Vec<f64> = bins.iter().map(|b| (b.mean_predicted - b.observed).abs()).collect();
    Ok(Calibration {
        ici: diffs.iter().sum::<f64>() / diffs.len() as f64,
        mce: diffs.iter().copied().fold(0.0, f64::max),
        bins,
    })
}

//! Product-limit estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvivalError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KmTarget {
    Event,
    /// Censoring treated as the event (for inverse-probability weights).
    Censoring,
}

/// Right-continuous step function: `surv[k]` holds on `[times[k], times[k+1])`
/// and the curve is 1 before `times[0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub surv: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub n_events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`, including any drop at `t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// `S(t⁻)`, excluding any drop at `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }
}

/// Kaplan–Meier over distinct times where the target indicator fires.
pub fn kaplan_meier(times: &[f64], events: &[bool], target: KmTarget) -> Result<KmCurve> {
    if times.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let hit = |i: usize| match target {
        KmTarget::Event => events[i],
        KmTarget::Censoring => !events[i],
    };
    let mut curve = KmCurve {
        times: Vec::new(),
        surv: Vec::new(),
        at_risk: Vec::new(),
        n_events: Vec::new(),
    };
    let mut s = 1.0;
    let mut at_risk = times.len();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0;
        let mut m = 0;
        while k + m < order.len() && times[order[k + m]] == t {
            d += usize::from(hit(order[k + m]));
            m += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.surv.push(s);
            curve.at_risk.push(at_risk);
            curve.n_events.push(d);
        }
        at_risk -= m;
        k += m;
    }
    Ok(curve)
}

/// Nelson–Aalen cumulative hazard at the distinct event times.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let km = kaplan_meier(times, events, KmTarget::Event)?;
    let mut h = 0.0;
    let cum = km
        .at_risk
        .iter()
        .zip(&km.n_events)
        .map(|(&r, &d)| {
            h += d as f64 / r as f64;
            h
        })
        .collect();
    Ok((km.times, cum))
}

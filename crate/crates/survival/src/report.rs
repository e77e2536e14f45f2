//! Bootstrapped metric summaries.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_ci, BootstrapSample};
use crate::error::{Result, SurvivalError};
use crate::metrics::{calibration_indices, censoring_curve, cumulative_dynamic_auc, ipcw_brier, uno_c_index};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    CIndex,
    Brier,
    Ici,
    Mce,
    BalancedAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Auc,
        Metric::CIndex,
        Metric::Brier,
        Metric::Ici,
        Metric::Mce,
        Metric::BalancedAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::CIndex => "c_index",
            Metric::Brier => "brier",
            Metric::Ici => "ici",
            Metric::Mce => "mce",
            Metric::BalancedAccuracy => "balanced_accuracy",
        }
    }

    /// Whether the metric consumes probabilities rather than risk scores.
    pub fn needs_probabilities(self) -> bool {
        matches!(self, Metric::Brier | Metric::Ici | Metric::Mce)
    }
}

/// Evaluates a single-sample metric on the rows `idx`, refitting the censoring
/// curve on those rows. Balanced accuracy needs a validation set and is not
/// handled here.
pub fn evaluate_metric(
    metric: Metric,
    scores: &[f64],
    durations: &[f64],
    events: &[bool],
    tau: f64,
    idx: &[usize],
) -> Result<f64> {
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let t: Vec<f64> = idx.iter().map(|&i| durations[i]).collect();
    let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
    match metric {
        Metric::Auc => Ok(cumulative_dynamic_auc(&s, &t, &e, tau, &censoring_curve(&t, &e)?)?.auc),
        Metric::CIndex => uno_c_index(&s, &t, &e, tau, &censoring_curve(&t, &e)?),
        Metric::Brier => ipcw_brier(&s, &t, &e, tau, &censoring_curve(&t, &e)?),
        Metric::Ici => Ok(calibration_indices(&s, &t, &e, tau, 10)?.ici),
        Metric::Mce => Ok(calibration_indices(&s, &t, &e, tau, 10)?.mce),
        Metric::BalancedAccuracy => Err(SurvivalError::Undefined("balanced accuracy needs validation data".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_bootstraps: usize,
    pub n_undefined: usize,
    pub tau_days: f64,
    pub n_instances: usize,
    pub n_events_by_tau: usize,
    /// Resampling noise can place the full-sample estimate outside the interval.
    pub point_outside_ci: bool,
}

impl MetricReport {
    pub fn from_sample(
        metric: &str,
        sample: &BootstrapSample,
        n_bootstraps: usize,
        durations: &[f64],
        events: &[bool],
        tau_days: f64,
    ) -> Self {
        MetricReport {
            metric: metric.to_string(),
            point: sample.point,
            ci_low: sample.ci_low,
            ci_high: sample.ci_high,
            n_bootstraps,
            n_undefined: sample.n_undefined,
            tau_days,
            n_instances: durations.len(),
            n_events_by_tau: durations.iter().zip(events).filter(|(&t, &e)| e && t <= tau_days).count(),
            point_outside_ci: sample.point < sample.ci_low || sample.point > sample.ci_high,
        }
    }
}

/// Point estimate and percentile interval over `n_boot` test-set resamples.
pub fn metric_report(
    metric: Metric,
    scores: &[f64],
    durations: &[f64],
    events: &[bool],
    tau_days: f64,
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport> {
    let sample = bootstrap_ci(durations.len(), n_boot, seed, |idx| {
        evaluate_metric(metric, scores, durations, events, tau_days, idx)
    })?;
    Ok(MetricReport::from_sample(metric.name(), &sample, n_boot, durations, events, tau_days))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_fields() {
        let n = 60;
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let e: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let r: Vec<f64> = (0..n).map(|i| -(i as f64) + ((i * 13) % 7) as f64 * 3.0).collect();
        let rep = metric_report(Metric::Auc, &r, &t, &e, 30.0, 50, 2).unwrap();
        assert_eq!(rep.metric, "auc");
        assert_eq!(rep.n_instances, 60);
        assert_eq!(rep.n_events_by_tau, (0..30).filter(|i| i % 3 != 0).count());
        assert!(rep.ci_low <= rep.ci_high);
        assert_eq!(rep, metric_report(Metric::Auc, &r, &t, &e, 30.0, 50, 2).unwrap());
    }
}

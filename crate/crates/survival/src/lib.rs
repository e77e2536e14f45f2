//! Survival models and time-to-event evaluation.

pub mod bootstrap;
pub mod cox;
pub mod error;
pub mod km;
pub mod metrics;
pub mod pca;
pub mod report;
pub mod sampling;

pub use bootstrap::{bootstrap_ci, bootstrap_significance, percentile, BootstrapSample, SignificanceResult};
pub use cox::{estimate_baseline_hazard, fit_cox, BaselineHazard, CoxDiagnostics, CoxModel};
pub use error::{Result, SurvivalError};
pub use km::{kaplan_meier, nelson_aalen, KmCurve, KmTarget};
pub use metrics::{
    balanced_accuracy, balanced_accuracy_at, calibration_indices, censoring_curve, cumulative_dynamic_auc,
    ipcw_brier, ipcw_weight, label_at, uno_c_index, AucResult, BalancedAccuracy, Calibration,
};
pub use pca::{fit_pca, PcaProjection};
pub use report::{evaluate_metric, metric_report, Metric, MetricReport};
pub use sampling::case_cohort_sample;

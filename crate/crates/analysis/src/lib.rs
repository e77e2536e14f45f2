//! Patient similarity search and model attribution on top of the encoder and
//! the survival heads.

pub mod attribution;
pub mod error;
pub mod retrieval;
pub mod task_model;

pub use attribution::{
    aggregate_attributions, attribute_patient, encoder_ig, integrated_gradients, loto_deltas, loto_deltas_with, risk_trajectory,
    top_quartile, AttributionRecord, IgResult, LotoDelta, PatientAttribution, PopulationImportance, TokenRef,
    TrajectoryPoint,
};
pub use error::{AnalysisError, Result};
pub use retrieval::{
    build_index, evaluate_retrieval, knn_among, knn_query, last_note_index, FoldResult, RetrievalReport,
    SearchIndex,
};
pub use task_model::TaskModel;

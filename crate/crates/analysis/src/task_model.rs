//! A fitted time-to-event head: frozen encoder embedding, PCA, then Cox.

use chronoscope_core::{Modality, PatientRecord};
use chronoscope_encoder::{embed_patient, EncoderParams};
use chronoscope_survival::{CoxModel, PcaProjection};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub pca: PcaProjection,
    pub cox: CoxModel,
    pub prompt: Modality,
    pub tau_days: f64,
}

impl TaskModel {
    /// `w` with `risk(h) = w . h + b` for an embedding `h`.
    pub fn score_direction(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.pca.mean.len()];
        for (beta, comp) in self.cox.beta.iter().zip(&self.pca.components) {
            for (wi, ci) in w.iter_mut().zip(comp) {
                *wi += beta * ci;
            }
        }
        w
    }

    pub fn features(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pca.project(embedding)?)
    }

    /// Cox linear predictor for an embedding.
    pub fn risk_of_embedding(&self, embedding: &[f64]) -> Result<f64> {
        Ok(self.cox.predict_risk(&self.features(embedding)?)?)
    }

    pub fn risk(&self, params: &EncoderParams, patient: &PatientRecord, as_of_min: i64) -> Result<f64> {
        self.risk_of_embedding(&embed_patient(patient, params, self.prompt, as_of_min)?)
    }

    /// `1 - S(tau | x)`; requires a baseline hazard on the model.
    pub fn event_probability(&self, params: &EncoderParams, patient: &PatientRecord, as_of_min: i64) -> Result<f64> {
        let h = embed_patient(patient, params, self.prompt, as_of_min)?;
        Ok(self.cox.event_probability(&self.features(&h)?, self.tau_days)?)
    }
}

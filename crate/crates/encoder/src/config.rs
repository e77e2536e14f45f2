use chronoscope_core::Modality;
use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the transformer feed-forward block.
    pub mlp_width: usize,
    /// Maximum number of events per forward pass (prefix and prompt excluded).
    pub max_seq: usize,
    pub mask_ratio: f64,
    pub note_dim: usize,
    pub report_dim: usize,
    pub image_dim: usize,
    pub ethnicity_dim: usize,
    /// Rate for the transformer, embedding tables and mask vectors.
    pub lr_base: f64,
    /// Rate for input projectors and output heads.
    pub lr_heads: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    /// Validation patients scored at each evaluation; 0 means all.
    pub val_patients: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        let total = 3000;
        EncoderConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_width: 256,
            max_seq: 256,
            mask_ratio: 0.3,
            note_dim: 16,
            report_dim: 16,
            image_dim: 12,
            ethnicity_dim: 8,
            lr_base: 1e-3,
            lr_heads: 3e-3,
            warmup_iters: total / 10,
            total_iters: total,
            weight_decay: 1e-5,
            grad_clip: 1.0,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 100,
            val_patients: 256,
            seed: 0,
        }
    }

    /// Full-size configuration (12 layers, width 768, context 1536).
    pub fn paper() -> Self {
        let total = 30_000;
        EncoderConfig {
            embed_dim: 768,
            n_layers: 12,
            n_heads: 12,
            mlp_width: 3072,
            max_seq: 1536,
            lr_base: 2e-4,
            lr_heads: 6e-4,
            warmup_iters: 3000,
            total_iters: total,
            batch_size: 256,
            ..Self::desk()
        }
    }

    /// Smallest useful configuration, for gradient checks and unit tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_width: 32,
            max_seq: 6,
            note_dim: 4,
            report_dim: 3,
            image_dim: 5,
            ethnicity_dim: 3,
            total_iters: 20,
            warmup_iters: 2,
            batch_size: 4,
            eval_every: 5,
            val_patients: 0,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn dense_dim(&self, slot: usize) -> usize {
        [self.note_dim, self.report_dim, self.image_dim][slot]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be a positive multiple of n_heads");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1)");
        }
        if self.max_seq == 0 || self.mlp_width == 0 || self.batch_size == 0 {
            return bad("max_seq, mlp_width and batch_size must be positive");
        }
        if self.warmup_iters > self.total_iters {
            return bad("warmup_iters exceeds total_iters");
        }
        if !(self.grad_clip > 0.0) || self.lr_base < 0.0 || self.lr_heads < 0.0 {
            return bad("grad_clip must be positive and learning rates non-negative");
        }
        Ok(())
    }
}

/// Index of an unstructured modality's projector, head and mask vector.
pub fn dense_slot(m: Modality) -> Option<usize> {
    match m {
        Modality::NoteText => Some(0),
        Modality::ReportText => Some(1),
        Modality::Image => Some(2),
        _ => None,
    }
}

/// Index of a structured modality's mask vector.
pub fn struct_slot(m: Modality) -> Option<usize> {
    match m {
        Modality::Diagnosis => Some(0),
        Modality::Medication => Some(1),
        Modality::Lab => Some(2),
        Modality::Vital => Some(3),
        Modality::Flowsheet => Some(4),
        _ => None,
    }
}

pub const N_STRUCT_SLOTS: usize = 5;
pub const N_DENSE_SLOTS: usize = 3;

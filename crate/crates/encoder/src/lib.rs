//! Masked multimodal temporal transformer over patient event streams, trained
//! by reconstructing hidden structured tokens and unstructured payloads.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod hazard;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod train;

pub use config::EncoderConfig;
pub use embed::{embed_patient, embed_patients, prompt_input, prompt_window};
pub use error::{EncoderError, Result};
pub use hazard::{discrete_hazard_loss, make_time_bins, DiscreteHazardHead};
pub use loss::{apply_masking, DecodeTable, MaskedBatch, Target};
pub use model::{backward, embed_sequence, forward, Content, Item, SeqInput, Tape};
pub use params::{EncoderParams, Grads};
pub use train::{pretrain, TrainReport};

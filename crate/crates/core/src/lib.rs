//! Data model, synthetic cohort generation, structured-value tokenization and
//! time-to-event task curation.

pub mod curation;
pub mod domain;
pub mod error;
pub mod io;
pub mod synth;
pub mod tokenizer;
pub mod vocab;

pub use domain::{
    seeded_hash, split_assign, validate_patient, DenseDims, Demographics, EventRecord, Modality, Payload,
    PatientRecord, Sex, Split, SplitRatios, TokenId,
};
pub use error::{CoreError, Result};
pub use vocab::{DecodeGroup, TokenKey, VocabEntry, Vocabulary};

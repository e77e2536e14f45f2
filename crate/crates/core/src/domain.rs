//! Event and patient data model shared by every pipeline stage.
//!
//! Times are integer minutes since the patient's birth. Structured events
//! start life with a raw payload (`Code`, `Numeric` or `Category`) and are
//! rewritten to `Token` by the tokenizer; unstructured events always carry a
//! dense vector produced by an upstream encoder.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub const MINUTES_PER_DAY: i64 = 24 * 60;
pub const MINUTES_PER_YEAR: f64 = 365.25 * 24.0 * 60.0;
/// Normalizer for the time encoding: event times become fractions of 100 years.
pub const MINUTES_PER_CENTURY: f64 = 100.0 * MINUTES_PER_YEAR;

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Diagnosis,
    Medication,
    Lab,
    Vital,
    Flowsheet,
    NoteText,
    ReportText,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 8] = [
        Modality::Diagnosis,
        Modality::Medication,
        Modality::Lab,
        Modality::Vital,
        Modality::Flowsheet,
        Modality::NoteText,
        Modality::ReportText,
        Modality::Image,
    ];
    pub const STRUCTURED: [Modality; 5] = [
        Modality::Diagnosis,
        Modality::Medication,
        Modality::Lab,
        Modality::Vital,
        Modality::Flowsheet,
    ];
    pub const UNSTRUCTURED: [Modality; 3] =
        [Modality::NoteText, Modality::ReportText, Modality::Image];

    pub fn is_structured(self) -> bool {
        matches!(
            self,
            Modality::Diagnosis
                | Modality::Medication
                | Modality::Lab
                | Modality::Vital
                | Modality::Flowsheet
        )
    }

    /// Measurement modalities whose decoding is further restricted to a subdomain class.
    pub fn has_subdomain(self) -> bool {
        matches!(self, Modality::Lab | Modality::Vital | Modality::Flowsheet)
    }

    /// Position within [`Modality::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Position within [`Modality::STRUCTURED`] or [`Modality::UNSTRUCTURED`].
    pub fn family_index(self) -> usize {
        match self {
            Modality::NoteText => 0,
            Modality::ReportText => 1,
            Modality::Image => 2,
            m => m as usize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Diagnosis => "diagnosis",
            Modality::Medication => "medication",
            Modality::Lab => "lab",
            Modality::Vital => "vital",
            Modality::Flowsheet => "flowsheet",
            Modality::NoteText => "note",
            Modality::ReportText => "report",
            Modality::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        let s = s.trim().to_ascii_lowercase();
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s || format!("{m:?}").to_ascii_lowercase() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Tokenized structured event.
    Token(TokenId),
    /// Pre-extracted embedding of an unstructured event.
    Dense(Vec<f64>),
    /// Untokenized diagnosis or medication; the code itself is the content.
    Code,
    /// Untokenized numeric measurement.
    Numeric(f64),
    /// Untokenized categorical measurement (free text answer).
    Category(String),
}

impl Payload {
    pub fn is_dense(&self) -> bool {
        matches!(self, Payload::Dense(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time_min: i64,
    pub modality: Modality,
    pub payload: Payload,
    pub source_code: String,
}

impl EventRecord {
    pub fn new(time_min: i64, modality: Modality, source_code: impl Into<String>, payload: Payload) -> Self {
        Self {
            time_min,
            modality,
            payload,
            source_code: source_code.into(),
        }
    }

    pub fn token(&self) -> Option<TokenId> {
        match self.payload {
            Payload::Token(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub ethnicity_vec: Vec<f64>,
    /// Calendar minute of birth relative to 1970-01-01T00:00Z.
    pub birth_epoch_min: i64,
    pub age_at_last_event_min: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub events: Vec<EventRecord>,
    pub death_time_min: Option<i64>,
}

impl PatientRecord {
    /// Stable sort by time; equal timestamps keep ingestion order.
    pub fn sort_events(&mut self) {
        self.events.sort_by_key(|e| e.time_min);
    }

    pub fn last_event_time(&self) -> Option<i64> {
        self.events.last().map(|e| e.time_min)
    }

    /// Events with `time_min <= as_of_min` (events are assumed sorted).
    pub fn history_until(&self, as_of_min: i64) -> &[EventRecord] {
        let end = self.events.partition_point(|e| e.time_min <= as_of_min);
        &self.events[..end]
    }

    /// End of follow-up: death if recorded, otherwise the last event.
    pub fn end_of_record(&self) -> Option<i64> {
        match (self.death_time_min, self.last_event_time()) {
            (Some(d), Some(l)) => Some(d.max(l)),
            (Some(d), None) => Some(d),
            (None, l) => l,
        }
    }
}

/// Expected dense dimensions per unstructured modality and for the ethnicity vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseDims {
    pub note_text: usize,
    pub report_text: usize,
    pub image: usize,
    pub ethnicity: usize,
}

impl DenseDims {
    pub fn of(&self, m: Modality) -> Option<usize> {
        match m {
            Modality::NoteText => Some(self.note_text),
            Modality::ReportText => Some(self.report_text),
            Modality::Image => Some(self.image),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NegativeTime { index: usize, time_min: i64 },
    Unsorted { index: usize },
    StructuredWithDense { index: usize, modality: Modality },
    UnstructuredWithoutDense { index: usize, modality: Modality },
    DenseDim { index: usize, modality: Modality, expected: usize, got: usize },
    NonFiniteDense { index: usize },
    NegativeAge { age_min: i64 },
    NonFiniteEthnicity,
    EthnicityDim { expected: usize, got: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_patient(p: &PatientRecord, dims: &DenseDims) -> ValidationReport {
    let mut violations = Vec::new();
    let demo = &p.demographics;
    if demo.age_at_last_event_min < 0 {
        violations.push(Violation::NegativeAge {
            age_min: demo.age_at_last_event_min,
        });
    }
    if demo.ethnicity_vec.iter().any(|v| !v.is_finite()) {
        violations.push(Violation::NonFiniteEthnicity);
    }
    if demo.ethnicity_vec.len() != dims.ethnicity {
        violations.push(Violation::EthnicityDim {
            expected: dims.ethnicity,
            got: demo.ethnicity_vec.len(),
        });
    }
    for (index, e) in p.events.iter().enumerate() {
        if e.time_min < 0 {
            violations.push(Violation::NegativeTime {
                index,
                time_min: e.time_min,
            });
        }
        if index > 0 && p.events[index - 1].time_min > e.time_min {
            violations.push(Violation::Unsorted { index });
        }
        match (&e.payload, e.modality.is_structured()) {
            (Payload::Dense(_), true) => violations.push(Violation::StructuredWithDense {
                index,
                modality: e.modality,
            }),
            (Payload::Dense(v), false) => {
                let expected = dims.of(e.modality).unwrap_or(0);
                if v.len() != expected {
                    violations.push(Violation::DenseDim {
                        index,
                        modality: e.modality,
                        expected,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    violations.push(Violation::NonFiniteDense { index });
                }
            }
            (_, false) => violations.push(Violation::UnstructuredWithoutDense {
                index,
                modality: e.modality,
            }),
            (_, true) => {}
        }
    }
    ValidationReport { violations }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.05,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidRatios(self.train, self.val, self.test));
        }
        Ok(())
    }
}

/// Seeded 64-bit hash of an opaque identifier, stable across processes and platforms.
pub fn seeded_hash(id: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Deterministic split membership from the id hash.
pub fn split_assign(patient_id: &str, ratios: &SplitRatios, seed: u64) -> Result<Split> {
    ratios.check()?;
    let u = (seeded_hash(patient_id, seed) >> 11) as f64 / (1u64 << 53) as f64;
    Ok(if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    })
}

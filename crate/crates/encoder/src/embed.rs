//! Patient embeddings from an appended, masked prompt position.

use chronoscope_core::{EventRecord, Modality, PatientRecord};
use rayon::prelude::*;

use crate::config::{dense_slot, struct_slot};
use crate::error::{EncoderError, Result};
use crate::model::{forward, time_fraction, Content, Item, SeqInput};
use crate::params::EncoderParams;
use crate::sequence::{build_input, canonical_order};

/// Raw history cap before windowing.
pub const MAX_HISTORY: usize = 100_000;

pub fn prompt_content(m: Modality) -> Result<Content> {
    match m {
        Modality::Diagnosis => Ok(Content::MaskStruct(struct_slot(m).expect("structured"))),
        Modality::NoteText | Modality::Image => Ok(Content::MaskDense(dense_slot(m).expect("unstructured"))),
        _ => Err(EncoderError::BadPrompt),
    }
}

/// The events fed to the encoder at `as_of_min`, in input order.
pub fn prompt_window(p: &PatientRecord, max_seq: usize, as_of_min: i64) -> Vec<EventRecord> {
    let hist = p.history_until(as_of_min);
    let hist = &hist[hist.len().saturating_sub(MAX_HISTORY)..];
    canonical_order(&hist[hist.len().saturating_sub(max_seq)..])
}

/// Input for the prompted forward pass: events up to `as_of_min`, capped to
/// [`MAX_HISTORY`], windowed to the most recent `max_seq`, then the prompt.
/// The prompt and the age token take the time of the last retained event, or
/// `as_of_min` for an empty history.
pub fn prompt_input(p: &PatientRecord, params: &EncoderParams, prompt: Modality, as_of_min: i64) -> Result<SeqInput> {
    if as_of_min < 0 {
        return Err(EncoderError::BeforeBirth { as_of_min });
    }
    let content = prompt_content(prompt)?;
    let events = prompt_window(p, params.config.max_seq, as_of_min);
    let last = events.last().map_or(as_of_min, |e| e.time_min);
    let mut input = build_input(p, &events, last, &params.config)?;
    input.items.push(Item {
        content,
        tau: time_fraction(last),
    });
    Ok(input)
}

pub fn embed_patient(p: &PatientRecord, params: &EncoderParams, prompt: Modality, as_of_min: i64) -> Result<Vec<f64>> {
    let input = prompt_input(p, params, prompt, as_of_min)?;
    let tape = forward(params, &input)?;
    Ok(tape.hidden.row(tape.hidden.nrows() - 1).to_vec())
}

/// Embeds many `(patient, as_of)` pairs in parallel; output order follows input.
pub fn embed_patients(
    queries: &[(&PatientRecord, i64)],
    params: &EncoderParams,
    prompt: Modality,
) -> Result<Vec<Vec<f64>>> {
    queries
        .par_iter()
        .map(|(p, t)| embed_patient(p, params, prompt, *t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use chronoscope_core::{Demographics, EventRecord, Payload, Sex};

    fn patient(events: Vec<EventRecord>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            demographics: Demographics {
                sex: Sex::Male,
                ethnicity_vec: vec![0.1, 0.2, 0.3],
                birth_epoch_min: 0,
                age_at_last_event_min: 0,
            },
            events,
            death_time_min: None,
        }
    }

    fn tok(t: i64, id: u32) -> EventRecord {
        EventRecord::new(t, Modality::Diagnosis, &format!("D{id}"), Payload::Token(id))
    }

    fn params() -> EncoderParams {
        EncoderParams::init(&EncoderConfig::tiny(), 6).unwrap()
    }

    #[test]
    fn prompts_differ() {
        let p = patient(vec![tok(100, 1), tok(200, 2)]);
        let a = embed_patient(&p, &params(), Modality::Diagnosis, 1000).unwrap();
        let b = embed_patient(&p, &params(), Modality::NoteText, 1000).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            embed_patient(&p, &params(), Modality::Lab, 1000),
            Err(EncoderError::BadPrompt)
        ));
    }

    #[test]
    fn empty_history_finite() {
        let p = patient(vec![tok(100, 1)]);
        let e = embed_patient(&p, &params(), Modality::Diagnosis, 50).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        assert!(matches!(
            embed_patient(&p, &params(), Modality::Diagnosis, -1),
            Err(EncoderError::BeforeBirth { .. })
        ));
    }

    #[test]
    fn later_events_invisible() {
        let base = patient(vec![tok(100, 1), tok(200, 2)]);
        let mut extended = base.clone();
        extended.events.push(tok(201, 3));
        let a = embed_patient(&base, &params(), Modality::Diagnosis, 200).unwrap();
        let b = embed_patient(&extended, &params(), Modality::Diagnosis, 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_time_permutation_exact() {
        let a = patient(vec![tok(100, 1), tok(200, 2), tok(200, 4), tok(200, 3)]);
        let mut b = a.clone();
        b.events.swap(1, 3);
        b.events.swap(2, 3);
        let ea = embed_patient(&a, &params(), Modality::Diagnosis, 300).unwrap();
        let eb = embed_patient(&b, &params(), Modality::Diagnosis, 300).unwrap();
        assert_eq!(ea, eb);
    }
}

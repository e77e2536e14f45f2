//! Conversion from tokenized patient records to model inputs.

use std::cmp::Ordering;

use chronoscope_core::{EventRecord, Payload, PatientRecord};

use crate::config::{dense_slot, EncoderConfig};
use crate::error::{EncoderError, Result};
use crate::model::{time_fraction, Content, Item, SeqInput};

fn content_cmp(a: &EventRecord, b: &EventRecord) -> Ordering {
    match (&a.payload, &b.payload) {
        (Payload::Token(x), Payload::Token(y)) => x.cmp(y),
        (Payload::Token(_), _) => Ordering::Less,
        (_, Payload::Token(_)) => Ordering::Greater,
        (Payload::Dense(x), Payload::Dense(y)) => a
            .modality
            .cmp(&b.modality)
            .then_with(|| x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal))
            .then(x.len().cmp(&y.len())),
        _ => a.source_code.cmp(&b.source_code),
    }
}

/// Events ordered by time, with same-time events in a canonical content order
/// so that the model input does not depend on how ties were recorded.
pub fn canonical_order(events: &[EventRecord]) -> Vec<EventRecord> {
    let mut v = events.to_vec();
    v.sort_by(|a, b| a.time_min.cmp(&b.time_min).then_with(|| content_cmp(a, b)));
    v
}

pub fn event_item(e: &EventRecord, pos: usize) -> Result<Item> {
    let content = match (&e.payload, dense_slot(e.modality)) {
        (Payload::Token(t), None) => Content::Token(*t),
        (Payload::Dense(x), Some(slot)) => Content::Dense { slot, x: x.clone() },
        _ => return Err(EncoderError::Untokenized { pos }),
    };
    Ok(Item {
        content,
        tau: time_fraction(e.time_min),
    })
}

/// Model input for `events` (already windowed and canonically ordered). The
/// age token encodes `age_min`.
pub fn build_input(p: &PatientRecord, events: &[EventRecord], age_min: i64, cfg: &EncoderConfig) -> Result<SeqInput> {
    let items = events
        .iter()
        .enumerate()
        .map(|(i, e)| event_item(e, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ethnicity = p.demographics.ethnicity_vec.clone();
    if ethnicity.len() != cfg.ethnicity_dim {
        return Err(EncoderError::DenseDim {
            found: ethnicity.len(),
            expected: cfg.ethnicity_dim,
        });
    }
    ethnicity.shrink_to_fit();
    Ok(SeqInput {
        sex: p.demographics.sex.index(),
        ethnicity,
        age: time_fraction(age_min),
        items,
    })
}

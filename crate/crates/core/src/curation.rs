//! Time-to-event task curation: snapshot and endpoint selection, blackout,
//! demographic filters, and one instance per patient.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    seeded_hash, split_assign, PatientRecord, Sex, Split, SplitRatios, MINUTES_PER_DAY,
    MINUTES_PER_YEAR,
};
use crate::error::{CoreError, Result};
use crate::synth::{DISCHARGE_CODE, ED_ADMIT_CODE};

/// Durations beyond 100 years are discarded.
pub const MAX_DURATION_DAYS: f64 = 36_500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskCategory {
    Onset,
    Progression,
    TreatmentResponse,
    AdverseEvent,
    Operations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnapshotRule {
    /// Any hospital discharge preceded by at least `min_prior_visits` visit days.
    Discharge { min_prior_visits: usize },
    /// First occurrence of any listed code (first diagnosis or first administration).
    FirstOccurrence { codes: Vec<String> },
    /// Each emergency admission, shifted by a fixed offset.
    AdmissionOffset { hours: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointRule {
    /// Endpoint codes; a trailing `*` matches by prefix.
    #[serde(default)]
    pub codes: Vec<String>,
    #[serde(default)]
    pub include_death: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub category: TaskCategory,
    pub tau_days: u32,
    pub snapshot_rule: SnapshotRule,
    pub endpoint_rule: EndpointRule,
    #[serde(default)]
    pub sex_filter: Option<Sex>,
    #[serde(default)]
    pub age_sd_filter: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau_days == 0 {
            return Err(CoreError::InvalidConfig(format!("task {}: tau must be > 0", self.name)));
        }
        if self.endpoint_rule.codes.is_empty() && !self.endpoint_rule.include_death {
            return Err(CoreError::InvalidConfig(format!("task {}: empty endpoint", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TteInstance {
    pub patient_id: String,
    pub snapshot_min: i64,
    pub duration_days: f64,
    pub event: bool,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationLog {
    pub task: String,
    pub candidates: usize,
    pub dropped_no_snapshot: usize,
    pub dropped_blackout: usize,
    pub dropped_100yr: usize,
    pub dropped_sex: usize,
    pub dropped_age_sd: usize,
    pub final_n: usize,
    pub final_events: usize,
}

impl CurationLog {
    pub fn reconciles(&self) -> bool {
        self.candidates
            == self.final_n
                + self.dropped_no_snapshot
                + self.dropped_blackout
                + self.dropped_100yr
                + self.dropped_sex
                + self.dropped_age_sd
    }
}

/// Blackout in days; `tau = 90` falls in the middle branch.
pub fn blackout_days(tau_days: u32) -> u32 {
    if tau_days > 90 {
        30
    } else if tau_days >= 60 {
        7
    } else {
        1
    }
}

fn code_matches(pattern: &str, code: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => code.starts_with(prefix),
        None => pattern == code,
    }
}

fn first_time_of(p: &PatientRecord, codes: &[String]) -> Option<i64> {
    p.events
        .iter()
        .find(|e| codes.iter().any(|c| code_matches(c, &e.source_code)))
        .map(|e| e.time_min)
}

/// Endpoint time: first endpoint code, or death when the rule includes it.
pub fn endpoint_time(p: &PatientRecord, rule: &EndpointRule) -> Option<i64> {
    let by_code = first_time_of(p, &rule.codes);
    let by_death = if rule.include_death { p.death_time_min } else { None };
    match (by_code, by_death) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn snapshots(p: &PatientRecord, rule: &SnapshotRule) -> Vec<i64> {
    match rule {
        SnapshotRule::Discharge { min_prior_visits } => {
            let mut days = BTreeSet::new();
            let mut out = Vec::new();
            for e in &p.events {
                let day = e.time_min.div_euclid(MINUTES_PER_DAY);
                if e.source_code == DISCHARGE_CODE {
                    let prior = days.range(..day).count();
                    if prior >= *min_prior_visits {
                        out.push(e.time_min);
                    }
                }
                days.insert(day);
            }
            out
        }
        SnapshotRule::FirstOccurrence { codes } => first_time_of(p, codes).into_iter().collect(),
        SnapshotRule::AdmissionOffset { hours } => p
            .events
            .iter()
            .filter(|e| e.source_code == ED_ADMIT_CODE)
            .map(|e| e.time_min + hours * 60)
            .collect(),
    }
}

/// How patients map to splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl SplitPolicy {
    pub fn split_of(&self, patient_id: &str) -> Split {
        split_assign(patient_id, &self.ratios, self.seed).expect("ratios validated at construction")
    }
}

/// Mean and SD of the endpoint's first-diagnosis age (minutes) over training patients.
pub fn endpoint_age_stats(cohort: &[PatientRecord], spec: &TaskSpec, splits: &SplitPolicy) -> Option<(f64, f64)> {
    let ages: Vec<f64> = cohort
        .iter()
        .filter(|p| splits.split_of(&p.patient_id) == Split::Train)
        .filter_map(|p| first_time_of(p, &spec.endpoint_rule.codes))
        .map(|t| t as f64)
        .collect();
    if ages.len() < 2 {
        return None;
    }
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub fn curate_task(
    cohort: &[PatientRecord],
    spec: &TaskSpec,
    splits: &SplitPolicy,
    seed: u64,
) -> Result<(Vec<TteInstance>, CurationLog)> {
    spec.validate()?;
    let blackout_min = blackout_days(spec.tau_days) as i64 * MINUTES_PER_DAY;
    let max_min = (MAX_DURATION_DAYS * MINUTES_PER_DAY as f64) as i64;
    let age_window = if spec.age_sd_filter {
        endpoint_age_stats(cohort, spec, splits).map(|(m, s)| (m - 2.0 * s, m + 2.0 * s))
    } else {
        None
    };
    let mut log = CurationLog {
        task: spec.name.clone(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for p in cohort {
        log.candidates += 1;
        if spec.sex_filter.is_some_and(|s| s != p.demographics.sex) {
            log.dropped_sex += 1;
            continue;
        }
        let mut snaps = snapshots(p, &spec.snapshot_rule);
        if snaps.is_empty() {
            log.dropped_no_snapshot += 1;
            continue;
        }
        if let Some((lo, hi)) = age_window {
            snaps.retain(|&s| (lo..=hi).contains(&(s as f64)));
            if snaps.is_empty() {
                log.dropped_age_sd += 1;
                continue;
            }
        }
        let endpoint = endpoint_time(p, &spec.endpoint_rule);
        let end = match endpoint {
            Some(e) => {
                snaps.retain(|&s| s < e);
                if snaps.is_empty() {
                    log.dropped_no_snapshot += 1;
                    continue;
                }
                snaps.retain(|&s| e - s >= blackout_min);
                if snaps.is_empty() {
                    log.dropped_blackout += 1;
                    continue;
                }
                e
            }
            None => {
                let c = p.end_of_record().unwrap_or(0);
                snaps.retain(|&s| s <= c);
                if snaps.is_empty() {
                    log.dropped_no_snapshot += 1;
                    continue;
                }
                c
            }
        };
        snaps.retain(|&s| end - s <= max_min);
        if snaps.is_empty() {
            log.dropped_100yr += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(&format!("{}\u{1f}{}", spec.name, p.patient_id), seed));
        let s = snaps[rng.random_range(0..snaps.len())];
        let event = endpoint.is_some();
        log.final_n += 1;
        log.final_events += usize::from(event);
        out.push(TteInstance {
            patient_id: p.patient_id.clone(),
            snapshot_min: s,
            duration_days: (end - s) as f64 / MINUTES_PER_DAY as f64,
            event,
            split: splits.split_of(&p.patient_id),
        });
    }
    if out.is_empty() {
        return Err(CoreError::NoEligiblePatients { task: spec.name.clone() });
    }
    debug_assert!(log.reconciles());
    Ok((out, log))
}

/// Percentage of instances reaching the endpoint within `tau_days`.
pub fn incidence(instances: &[TteInstance], tau_days: f64) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = instances
        .iter()
        .filter(|i| i.event && i.duration_days <= tau_days)
        .count();
    100.0 * hits as f64 / instances.len() as f64
}

/// Patients whose record shows `diagnosis` followed (at or after) by `medication`,
/// looking only at events up to `as_of_min` when given.
pub fn diagnosis_then_medication(
    cohort: &[PatientRecord],
    diagnosis: &str,
    medication: &str,
    as_of_min: Option<i64>,
) -> Vec<String> {
    cohort
        .iter()
        .filter(|p| {
            let hist = match as_of_min {
                Some(t) => p.history_until(t),
                None => &p.events[..],
            };
            let dx = hist.iter().find(|e| code_matches(diagnosis, &e.source_code));
            dx.is_some_and(|d| {
                hist.iter()
                    .any(|e| code_matches(medication, &e.source_code) && e.time_min >= d.time_min)
            })
        })
        .map(|p| p.patient_id.clone())
        .collect()
}

pub fn age_years(minutes: i64) -> f64 {
    minutes as f64 / MINUTES_PER_YEAR
}

pub fn write_instances_csv<W: Write>(w: W, instances: &[TteInstance]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["patient_id", "snapshot_min", "duration_days", "event", "split"])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    for i in instances {
        wtr.write_record([
            i.patient_id.clone(),
            i.snapshot_min.to_string(),
            format!("{:?}", i.duration_days),
            u8::from(i.event).to_string(),
            i.split.name().to_string(),
        ])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_instances_csv<R: Read>(r: R) -> Result<Vec<TteInstance>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CoreError::Format(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| CoreError::Format(format!("missing column {i}")));
        let parse_err = |e: String| CoreError::Format(e);
        out.push(TteInstance {
            patient_id: field(0)?.to_string(),
            snapshot_min: field(1)?.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            duration_days: field(2)?.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?,
            event: field(3)? == "1",
            split: Split::parse(field(4)?).ok_or_else(|| parse_err("bad split".into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Demographics, EventRecord, Modality, Payload};

    const DAY: i64 = MINUTES_PER_DAY;

    fn patient(id: &str, events: Vec<(i64, &str)>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            demographics: Demographics {
                sex: Sex::Female,
                ethnicity_vec: vec![],
                birth_epoch_min: 0,
                age_at_last_event_min: 0,
            },
            events: events
                .into_iter()
                .map(|(t, c)| EventRecord::new(t, Modality::Diagnosis, c, Payload::Code))
                .collect(),
            death_time_min: None,
        }
    }

    fn progression(tau: u32) -> TaskSpec {
        TaskSpec {
            name: "prog".into(),
            category: TaskCategory::Progression,
            tau_days: tau,
            snapshot_rule: SnapshotRule::FirstOccurrence { codes: vec!["A".into()] },
            endpoint_rule: EndpointRule {
                codes: vec!["B".into()],
                include_death: false,
            },
            sex_filter: None,
            age_sd_filter: false,
        }
    }

    fn policy() -> SplitPolicy {
        SplitPolicy {
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }

    #[test]
    fn blackout_branches() {
        assert_eq!(blackout_days(365), 30);
        assert_eq!(blackout_days(91), 30);
        assert_eq!(blackout_days(90), 7);
        assert_eq!(blackout_days(60), 7);
        assert_eq!(blackout_days(59), 1);
        assert_eq!(blackout_days(30), 1);
    }

    #[test]
    fn snapshot_after_endpoint_dropped() {
        let cohort = vec![
            patient("late", vec![(0, "X"), (10 * DAY, "B"), (20 * DAY, "A")]),
            patient("ok", vec![(0, "A"), (100 * DAY, "B")]),
        ];
        let (inst, log) = curate_task(&cohort, &progression(365), &policy(), 1).unwrap();
        assert_eq!(log.dropped_no_snapshot, 1);
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].duration_days, 100.0);
        assert!(inst[0].event);
        assert!(log.reconciles());
    }

    #[test]
    fn blackout_drop() {
        let cohort = vec![
            patient("close", vec![(0, "A"), (3 * DAY, "B")]),
            patient("far", vec![(0, "A"), (40 * DAY, "B")]),
        ];
        let (inst, log) = curate_task(&cohort, &progression(365), &policy(), 1).unwrap();
        assert_eq!(log.dropped_blackout, 1);
        assert_eq!(inst[0].patient_id, "far");
        // Short horizon: b = 1, so the 3-day gap survives.
        let (inst, _) = curate_task(&cohort, &progression(30), &policy(), 1).unwrap();
        assert_eq!(inst.len(), 2);
    }

    #[test]
    fn censored_at_last_event_or_death() {
        let mut p = patient("c", vec![(0, "A"), (50 * DAY, "X")]);
        let (inst, _) = curate_task(std::slice::from_ref(&p), &progression(365), &policy(), 1).unwrap();
        assert!(!inst[0].event);
        assert_eq!(inst[0].duration_days, 50.0);
        p.death_time_min = Some(70 * DAY);
        let (inst, _) = curate_task(std::slice::from_ref(&p), &progression(365), &policy(), 1).unwrap();
        assert!(!inst[0].event);
        assert_eq!(inst[0].duration_days, 70.0);
        let mut spec = progression(365);
        spec.endpoint_rule.include_death = true;
        let (inst, _) = curate_task(&[p], &spec, &policy(), 1).unwrap();
        assert!(inst[0].event);
    }

    #[test]
    fn sex_filter_and_empty() {
        let cohort = vec![patient("f", vec![(0, "A"), (100 * DAY, "B")])];
        let mut spec = progression(365);
        spec.sex_filter = Some(Sex::Male);
        assert!(matches!(
            curate_task(&cohort, &spec, &policy(), 0),
            Err(CoreError::NoEligiblePatients { .. })
        ));
    }

    #[test]
    fn discharge_needs_prior_visits() {
        let mut events: Vec<(i64, &str)> = (0..5).map(|d| (d * DAY, "X")).collect();
        events.insert(2, (2 * DAY + 10, DISCHARGE_CODE));
        events.push((9 * DAY, DISCHARGE_CODE));
        let p = patient("d", events);
        let snaps = snapshots(&p, &SnapshotRule::Discharge { min_prior_visits: 5 });
        assert_eq!(snaps, vec![9 * DAY]);
    }

    #[test]
    fn incidence_counts() {
        let mk = |d: f64, e: bool| TteInstance {
            patient_id: "p".into(),
            snapshot_min: 0,
            duration_days: d,
            event: e,
            split: Split::Test,
        };
        assert_eq!(incidence(&[mk(1.0, true), mk(2.0, true)], 10.0), 100.0);
        assert_eq!(incidence(&[mk(1.0, false), mk(2.0, false)], 10.0), 0.0);
        let mixed: Vec<TteInstance> = (0..10).map(|i| mk(i as f64 * 3.0, i % 2 == 0)).collect();
        // events at 0, 6, 12, 18, 24; within 13 days: 0, 6, 12
        assert_eq!(incidence(&mixed, 13.0), 30.0);
    }

    #[test]
    fn csv_round_trip() {
        let inst = vec![TteInstance {
            patient_id: "a".into(),
            snapshot_min: 12,
            duration_days: 1.0 / 3.0,
            event: true,
            split: Split::Val,
        }];
        let mut buf = Vec::new();
        write_instances_csv(&mut buf, &inst).unwrap();
        assert_eq!(read_instances_csv(&buf[..]).unwrap(), inst);
    }

    #[test]
    fn motif_selection() {
        let cohort = vec![
            patient("yes", vec![(0, "DX"), (5, "RX")]),
            patient("wrong_order", vec![(0, "RX"), (5, "DX")]),
            patient("late", vec![(0, "DX"), (500, "RX")]),
        ];
        assert_eq!(diagnosis_then_medication(&cohort, "DX", "RX", None), vec!["yes", "late"]);
        assert_eq!(diagnosis_then_medication(&cohort, "DX", "RX", Some(100)), vec!["yes"]);
    }
}

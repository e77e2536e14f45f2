//! Synthetic longitudinal cohorts with planted, analytically known risk.
//!
//! Every endpoint is emitted by a piecewise-constant proportional-hazards
//! process: a per-year baseline hazard multiplied by the multipliers of the
//! planted trigger codes already present in the record (after an activation
//! lag). Background events follow independent Poisson processes per modality,
//! clustered onto visit days. Unstructured payloads are noisy linear
//! projections of the patient's active signal codes, so notes and images
//! carry information that is redundant with the structured stream.
//!
//! Each patient draws from its own PRNG stream keyed by `(seed, index)`, so a
//! cohort of `n` patients is a prefix of the cohort of `m > n` patients with
//! the same configuration.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    seeded_hash, DenseDims, Demographics, EventRecord, Modality, Payload, PatientRecord, Sex,
    SplitRatios, MINUTES_PER_DAY, MINUTES_PER_YEAR,
};
use crate::error::{CoreError, Result};

/// Endpoint code that denotes death rather than a diagnosis.
pub const DEATH: &str = "DEATH";
pub const DISCHARGE_CODE: &str = "ADT_DISCHARGE";
pub const ED_ADMIT_CODE: &str = "ADT_ED_ADMIT";
pub const ADT_CLASS: &str = "ADT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub code: String,
    pub modality: Modality,
    /// Probability that a patient acquires the trigger at all.
    pub prevalence: f64,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRisk {
    /// Diagnosis code emitted at the endpoint, or [`DEATH`].
    pub endpoint_code: String,
    pub baseline_hazard_per_year: f64,
    pub triggers: Vec<Trigger>,
    /// Delay between a trigger's first occurrence and its effect on the hazard.
    #[serde(default)]
    pub activation_lag_days: f64,
}

/// A `diagnosis THEN medication` pattern planted in a fraction of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub diagnosis_code: String,
    pub medication_code: String,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Maximum follow-up; each patient's administrative censoring is uniform on it.
    pub horizon_years: f64,
    pub entry_age_years: (f64, f64),
    /// Background events per year, keyed by modality.
    pub modality_rates: BTreeMap<Modality, f64>,
    /// Size of the background code pool per structured modality.
    pub n_codes: BTreeMap<Modality, usize>,
    /// Fraction of lab codes with categorical answers.
    pub categorical_lab_fraction: f64,
    pub n_subdomain_classes: BTreeMap<Modality, usize>,
    pub visits_per_year: f64,
    pub admissions_per_year: f64,
    /// Codes in each patient's recurring profile, and the share of events drawn from it.
    pub profile_size: usize,
    pub profile_fraction: f64,
    /// Recurrence rate of planted codes after their first occurrence.
    pub planted_recurrence_per_year: f64,
    /// Triggers first occur uniformly within this many years of entry.
    pub trigger_onset_window_years: f64,
    pub planted: Vec<PlantedRisk>,
    #[serde(default)]
    pub motifs: Vec<Motif>,
    pub note_dim: usize,
    pub report_dim: usize,
    pub image_dim: usize,
    pub ethnicity_dim: usize,
    pub payload_noise_sigma: f64,
    #[serde(default)]
    pub split_ratios: SplitRatios,
}

impl CohortConfig {
    /// The desk-scale reference cohort used throughout the test suite.
    pub fn standard(n_patients: usize, seed: u64) -> Self {
        use Modality::*;
        let modality_rates = BTreeMap::from([
            (Diagnosis, 5.0),
            (Medication, 3.0),
            (Lab, 7.0),
            (Vital, 3.0),
            (Flowsheet, 2.0),
            (NoteText, 2.0),
            (ReportText, 0.6),
            (Image, 0.3),
        ]);
        let n_codes = BTreeMap::from([
            (Diagnosis, 120),
            (Medication, 60),
            (Lab, 30),
            (Vital, 6),
            (Flowsheet, 10),
        ]);
        let n_subdomain_classes = BTreeMap::from([(Lab, 4), (Vital, 1), (Flowsheet, 2)]);
        let trig = |code: &str, multiplier: f64, prevalence: f64| Trigger {
            code: code.into(),
            modality: Diagnosis,
            prevalence,
            multiplier,
        };
        CohortConfig {
            n_patients,
            seed,
            horizon_years: 10.0,
            entry_age_years: (30.0, 75.0),
            modality_rates,
            n_codes,
            categorical_lab_fraction: 0.2,
            n_subdomain_classes,
            visits_per_year: 5.0,
            admissions_per_year: 0.6,
            profile_size: 6,
            profile_fraction: 0.8,
            planted_recurrence_per_year: 2.0,
            trigger_onset_window_years: 0.5,
            planted: vec![
                PlantedRisk {
                    endpoint_code: "EP_ONSET".into(),
                    baseline_hazard_per_year: 0.006,
                    triggers: vec![
                        trig("TRG_A", 4.0, 0.2),
                        trig("TRG_B", 4.0, 0.2),
                        trig("TRG_C", 4.0, 0.2),
                        trig("TRG_D", 4.0, 0.2),
                    ],
                    activation_lag_days: 0.0,
                },
                PlantedRisk {
                    endpoint_code: DEATH.into(),
                    baseline_hazard_per_year: 0.01,
                    triggers: vec![trig("TRG_E", 3.0, 0.2)],
                    activation_lag_days: 0.0,
                },
            ],
            motifs: vec![Motif {
                diagnosis_code: "MOTIF_DX".into(),
                medication_code: "MOTIF_RX".into(),
                prevalence: 0.005,
            }],
            note_dim: 16,
            report_dim: 16,
            image_dim: 12,
            ethnicity_dim: 8,
            payload_noise_sigma: 0.3,
            split_ratios: SplitRatios::default(),
        }
    }

    pub fn dense_dims(&self) -> DenseDims {
        DenseDims {
            note_text: self.note_dim,
            report_text: self.report_dim,
            image: self.image_dim,
            ethnicity: self.ethnicity_dim,
        }
    }

    /// Latest time (minutes since birth) the generator can emit.
    pub fn horizon_min(&self) -> i64 {
        ((self.entry_age_years.1 + self.horizon_years) * MINUTES_PER_YEAR).ceil() as i64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        for (m, r) in &self.modality_rates {
            if !(*r > 0.0 && r.is_finite()) {
                return bad(format!("rate for {m:?} must be > 0"));
            }
        }
        for m in Modality::STRUCTURED {
            if self.modality_rates.contains_key(&m) && self.n_codes.get(&m).copied().unwrap_or(0) == 0 {
                return bad(format!("{m:?} has a rate but no codes"));
            }
        }
        if !(self.horizon_years > 0.0) || self.entry_age_years.0 < 0.0 || self.entry_age_years.1 < self.entry_age_years.0 {
            return bad("horizon and entry ages must be positive and ordered".into());
        }
        if !(self.visits_per_year > 0.0) || self.admissions_per_year < 0.0 {
            return bad("visit rate must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.profile_fraction) || !(0.0..=1.0).contains(&self.categorical_lab_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        for r in &self.planted {
            if !(r.baseline_hazard_per_year > 0.0) || r.activation_lag_days < 0.0 {
                return bad(format!("risk {}: baseline hazard must be > 0", r.endpoint_code));
            }
            for t in &r.triggers {
                if !(t.multiplier > 0.0) || !(0.0..=1.0).contains(&t.prevalence) {
                    return bad(format!("trigger {}: multiplier must be > 0", t.code));
                }
                if !t.modality.is_structured() || t.modality.has_subdomain() {
                    return bad(format!("trigger {} must be a diagnosis or medication", t.code));
                }
            }
        }
        if self.planted.iter().filter(|r| r.endpoint_code == DEATH).count() > 1 {
            return bad("at most one death risk".into());
        }
        Ok(())
    }

    fn trigger_multipliers(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for r in &self.planted {
            for t in &r.triggers {
                m.insert(t.code.clone(), t.multiplier);
            }
        }
        m
    }

    /// Planted codes (triggers, diagnosis endpoints, motif codes) feeding the dense payloads.
    pub fn signal_codes(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.planted {
            for t in &r.triggers {
                set.insert(t.code.clone());
            }
            if r.endpoint_code != DEATH {
                set.insert(r.endpoint_code.clone());
            }
        }
        for m in &self.motifs {
            set.insert(m.diagnosis_code.clone());
            set.insert(m.medication_code.clone());
        }
        set.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericCodeParams {
    pub mean_log: f64,
    pub between_sd: f64,
    pub within_sd: f64,
}

/// Fixed, seed-derived structure shared by all patients of a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub codes: BTreeMap<Modality, Vec<String>>,
    pub numeric: BTreeMap<String, NumericCodeParams>,
    pub categorical: BTreeSet<String>,
    pub subdomain_map: BTreeMap<String, String>,
    pub signal_codes: Vec<String>,
    /// Per unstructured modality: `signal_codes.len() + 1` rows of length d_k (last row is a bias).
    pub payload_matrices: BTreeMap<Modality, Vec<Vec<f64>>>,
    pub ethnicity_prototypes: Vec<Vec<f64>>,
}

const POSITIVE_RAW: [&str; 5] = ["pos", "POS ", "+", "positive", "Positive"];
const NEGATIVE_RAW: [&str; 5] = ["neg", "NEG", "-", "negative", " Negative"];
const UNMAPPED_RAW: [&str; 2] = ["see comment", "indeterminate??"];

fn code_name(m: Modality, i: usize) -> String {
    let prefix = match m {
        Modality::Diagnosis => "D",
        Modality::Medication => "M",
        Modality::Lab => "L",
        Modality::Vital => "V",
        Modality::Flowsheet => "F",
        _ => "U",
    };
    format!("{prefix}{i:03}")
}

impl World {
    pub fn build(cfg: &CohortConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash("world", cfg.seed));
        let mut codes = BTreeMap::new();
        let mut numeric = BTreeMap::new();
        let mut categorical = BTreeSet::new();
        let mut subdomain_map = BTreeMap::new();
        for m in Modality::STRUCTURED {
            let n = cfg.n_codes.get(&m).copied().unwrap_or(0);
            let list: Vec<String> = (0..n).map(|i| code_name(m, i)).collect();
            if m.has_subdomain() {
                let n_classes = cfg.n_subdomain_classes.get(&m).copied().unwrap_or(1).max(1);
                let n_cat = if m == Modality::Lab {
                    (n as f64 * cfg.categorical_lab_fraction).round() as usize
                } else {
                    0
                };
                for (i, c) in list.iter().enumerate() {
                    subdomain_map.insert(c.clone(), format!("{}_{}", m.name().to_uppercase(), i % n_classes));
                    if i < n_cat {
                        categorical.insert(c.clone());
                    } else {
                        numeric.insert(
                            c.clone(),
                            NumericCodeParams {
                                mean_log: rng.random_range(0.5..5.0),
                                between_sd: rng.random_range(0.2..0.6),
                                within_sd: rng.random_range(0.03..0.12),
                            },
                        );
                    }
                }
            }
            codes.insert(m, list);
        }
        subdomain_map.insert(DISCHARGE_CODE.into(), ADT_CLASS.into());
        subdomain_map.insert(ED_ADMIT_CODE.into(), ADT_CLASS.into());
        categorical.insert(DISCHARGE_CODE.into());
        categorical.insert(ED_ADMIT_CODE.into());

        let signal_codes = cfg.signal_codes();
        let mut payload_matrices = BTreeMap::new();
        for m in Modality::UNSTRUCTURED {
            let d = cfg.dense_dims().of(m).unwrap_or(0);
            let rows = signal_codes.len() + 1;
            let scale = 1.0 / (rows as f64).sqrt().max(1.0);
            let mat: Vec<Vec<f64>> = (0..rows)
                .map(|r| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            if r + 1 == rows { 0.5 * z } else { 2.0 * scale * z }
                        })
                        .collect()
                })
                .collect();
            payload_matrices.insert(m, mat);
        }
        let ethnicity_prototypes = (0..6)
            .map(|_| (0..cfg.ethnicity_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        World {
            codes,
            numeric,
            categorical,
            subdomain_map,
            signal_codes,
            payload_matrices,
            ethnicity_prototypes,
        }
    }
}

/// Planted ground truth for one patient. Never read by model code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub entry_min: i64,
    /// Administrative end of follow-up.
    pub censor_min: i64,
    pub death_min: Option<i64>,
    /// First occurrence of each acquired trigger.
    pub trigger_onsets: BTreeMap<String, i64>,
    /// Endpoint time per planted risk (keyed by endpoint code), if observed.
    pub endpoints: BTreeMap<String, i64>,
    /// Motif diagnosis and medication times, keyed by diagnosis code.
    pub motifs: BTreeMap<String, (i64, i64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: CohortConfig,
    pub world: World,
    pub patients: Vec<PatientTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCohort {
    pub patients: Vec<PatientRecord>,
    pub manifest: CohortManifest,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:07}")
}

fn to_min(years: f64) -> i64 {
    (years * MINUTES_PER_YEAR).round() as i64
}

struct PatientGen<'a> {
    cfg: &'a CohortConfig,
    world: &'a World,
    rng: ChaCha8Rng,
}

impl PatientGen<'_> {
    fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        let p = Poisson::new(mean).expect("positive mean");
        let x: f64 = p.sample(&mut self.rng);
        x as usize
    }

    fn uniform_time(&mut self, lo: i64, hi: i64) -> i64 {
        if hi <= lo {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    /// First time the cumulative hazard of a piecewise-constant process
    /// starting at `start` reaches an Exp(1) draw. `changes` are sorted
    /// `(time, multiplier)` pairs.
    fn sample_piecewise(&mut self, start: i64, base_per_min: f64, changes: &[(i64, f64)]) -> f64 {
        let target: f64 = self.rng.sample(Exp1);
        let mut t = start as f64;
        let mut rate = base_per_min;
        let mut acc = 0.0;
        for &(at, mult) in changes {
            let at = at as f64;
            if at > t {
                let gain = rate * (at - t);
                if acc + gain >= target {
                    return t + (target - acc) / rate;
                }
                acc += gain;
                t = at;
            }
            rate *= mult;
        }
        t + (target - acc) / rate
    }

    fn generate(&mut self, index: usize) -> (PatientRecord, PatientTruth) {
        let cfg = self.cfg;
        let world = self.world;
        let id = patient_id(index);
        let sex = match self.rng.random_range(0..100) {
            0..=47 => Sex::Male,
            48..=97 => Sex::Female,
            _ => Sex::Unknown,
        };
        let n_eth = if self.rng.random_bool(0.15) { 2 } else { 1 };
        let mut eth = vec![0.0; cfg.ethnicity_dim];
        for _ in 0..n_eth {
            let k = self.rng.random_range(0..world.ethnicity_prototypes.len());
            for (e, p) in eth.iter_mut().zip(&world.ethnicity_prototypes[k]) {
                *e += p / n_eth as f64;
            }
        }
        let entry_age = self.rng.random_range(cfg.entry_age_years.0..=cfg.entry_age_years.1);
        let entry = to_min(entry_age);
        let follow = self.rng.random_range(0.0..cfg.horizon_years);
        let censor = entry + to_min(follow);
        let birth_year = 2024.0 - entry_age - follow;
        let birth_epoch_min = to_min(birth_year - 1970.0);

        // Triggers and motifs.
        let onset_window = to_min(cfg.trigger_onset_window_years);
        let mut trigger_onsets = BTreeMap::new();
        let mut trigger_meta = Vec::new();
        for r in &cfg.planted {
            for t in &r.triggers {
                if trigger_onsets.contains_key(&t.code) {
                    continue;
                }
                if self.rng.random_bool(t.prevalence) {
                    let at = entry + self.uniform_time(0, onset_window);
                    if at <= censor {
                        trigger_onsets.insert(t.code.clone(), at);
                        trigger_meta.push((t.code.clone(), t.modality));
                    }
                }
            }
        }
        let mut motifs = BTreeMap::new();
        for m in &cfg.motifs {
            if self.rng.random_bool(m.prevalence) {
                let dx = entry + self.uniform_time(0, onset_window);
                let rx = dx + self.uniform_time(MINUTES_PER_DAY, 30 * MINUTES_PER_DAY);
                if rx <= censor {
                    motifs.insert(m.diagnosis_code.clone(), (dx, rx));
                }
            }
        }

        // Endpoints: death first, since it ends follow-up for everything else.
        let mut risks: Vec<&PlantedRisk> = cfg.planted.iter().collect();
        risks.sort_by_key(|r| r.endpoint_code != DEATH);
        let mut end = censor;
        let mut death = None;
        let mut endpoints = BTreeMap::new();
        for r in risks {
            let lag = (r.activation_lag_days * MINUTES_PER_DAY as f64).round() as i64;
            let mut changes: Vec<(i64, f64)> = r
                .triggers
                .iter()
                .filter_map(|t| trigger_onsets.get(&t.code).map(|&on| (on + lag, t.multiplier)))
                .collect();
            changes.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let base = r.baseline_hazard_per_year / MINUTES_PER_YEAR;
            let t = self.sample_piecewise(entry, base, &changes);
            // Integer minutes; strictly after entry so the endpoint follows the first visit.
            let t = (t.ceil() as i64).max(entry + 1);
            if t <= end {
                if r.endpoint_code == DEATH {
                    death = Some(t);
                    end = t;
                } else {
                    endpoints.insert(r.endpoint_code.clone(), t);
                }
            }
        }
        if let Some(d) = death {
            endpoints.insert(DEATH.into(), d);
        }
        // Drop anything planted after death.
        trigger_onsets.retain(|_, t| *t <= end);
        trigger_meta.retain(|(c, _)| trigger_onsets.contains_key(c));
        motifs.retain(|_, (_, rx)| *rx <= end);
        endpoints.retain(|c, t| c == DEATH || *t <= end);

        // Visit days (minute offsets of midnight within follow-up).
        let years = (end - entry) as f64 / MINUTES_PER_YEAR;
        let n_visits = self.poisson(cfg.visits_per_year * years).max(1);
        let mut visit_days: Vec<i64> = (0..n_visits)
            .map(|i| if i == 0 { entry } else { self.uniform_time(entry, end) })
            .collect();
        visit_days.sort_unstable();
        let at_visit = |g: &mut Self| -> i64 {
            let v = visit_days[g.rng.random_range(0..visit_days.len())];
            (v + g.rng.random_range(0..MINUTES_PER_DAY / 2)).min(end)
        };

        let mut events: Vec<EventRecord> = Vec::new();
        let zipf = |n: usize| WeightedIndex::new((0..n).map(|i| 1.0 / (i as f64 + 1.0))).expect("non-empty pool");

        // Recurring per-patient profile over diagnoses; medications follow diagnoses.
        let diag_pool = world.codes.get(&Modality::Diagnosis).cloned().unwrap_or_default();
        let profile: Vec<usize> = if diag_pool.is_empty() {
            Vec::new()
        } else {
            let z = zipf(diag_pool.len());
            (0..cfg.profile_size).map(|_| z.sample(&mut self.rng)).collect()
        };

        for m in Modality::STRUCTURED {
            let Some(&rate) = cfg.modality_rates.get(&m) else { continue };
            let pool = world.codes.get(&m).cloned().unwrap_or_default();
            if pool.is_empty() {
                continue;
            }
            let z = zipf(pool.len());
            // Per-patient latent level for each measurement code.
            let mut levels: BTreeMap<usize, f64> = BTreeMap::new();
            let mut pos_prob: BTreeMap<usize, f64> = BTreeMap::new();
            let patient_codes: Vec<usize> = match m {
                Modality::Lab | Modality::Vital | Modality::Flowsheet => {
                    let k = (pool.len() / 3).max(2).min(pool.len());
                    (0..k).map(|_| z.sample(&mut self.rng)).collect()
                }
                _ => Vec::new(),
            };
            let n = self.poisson(rate * years);
            for _ in 0..n {
                let t = at_visit(self);
                let from_profile = self.rng.random_bool(cfg.profile_fraction);
                let idx = match m {
                    Modality::Diagnosis if from_profile && !profile.is_empty() => {
                        profile[self.rng.random_range(0..profile.len())]
                    }
                    Modality::Medication if from_profile && !profile.is_empty() => {
                        profile[self.rng.random_range(0..profile.len())] % pool.len()
                    }
                    Modality::Lab | Modality::Vital | Modality::Flowsheet if from_profile => {
                        patient_codes[self.rng.random_range(0..patient_codes.len())]
                    }
                    _ => z.sample(&mut self.rng),
                };
                let code = &pool[idx];
                let payload = if !m.has_subdomain() {
                    Payload::Code
                } else if world.categorical.contains(code) {
                    let p = *pos_prob.entry(idx).or_insert_with(|| {
                        if self.rng.random_bool(0.5) { 0.9 } else { 0.1 }
                    });
                    let raw = if self.rng.random_bool(0.03) {
                        UNMAPPED_RAW[self.rng.random_range(0..UNMAPPED_RAW.len())]
                    } else if self.rng.random_bool(p) {
                        POSITIVE_RAW[self.rng.random_range(0..POSITIVE_RAW.len())]
                    } else {
                        NEGATIVE_RAW[self.rng.random_range(0..NEGATIVE_RAW.len())]
                    };
                    Payload::Category(raw.to_string())
                } else {
                    let prm = &world.numeric[code];
                    let level = *levels.entry(idx).or_insert_with(|| {
                        let z: f64 = self.rng.sample(StandardNormal);
                        prm.mean_log + prm.between_sd * z
                    });
                    let e: f64 = self.rng.sample(StandardNormal);
                    Payload::Numeric((level + prm.within_sd * e).exp())
                };
                events.push(EventRecord::new(t, m, code.clone(), payload));
            }
        }

        // Admissions: ED admit followed by a discharge 1-5 days later.
        let n_adm = self.poisson(cfg.admissions_per_year * years);
        for _ in 0..n_adm {
            let adm = at_visit(self);
            let dis = adm + self.rng.random_range(MINUTES_PER_DAY..=5 * MINUTES_PER_DAY);
            events.push(EventRecord::new(
                adm,
                Modality::Flowsheet,
                ED_ADMIT_CODE,
                Payload::Category("Admitted".into()),
            ));
            if dis <= end {
                events.push(EventRecord::new(
                    dis,
                    Modality::Flowsheet,
                    DISCHARGE_CODE,
                    Payload::Category("Discharged".into()),
                ));
            }
        }

        // Planted codes: exact first occurrence, then recurrences.
        let mut planted: Vec<(String, Modality, i64)> = trigger_meta
            .iter()
            .map(|(c, m)| (c.clone(), *m, trigger_onsets[c]))
            .collect();
        for (code, t) in &endpoints {
            if code != DEATH {
                planted.push((code.clone(), Modality::Diagnosis, *t));
            }
        }
        for m in &cfg.motifs {
            if let Some(&(dx, rx)) = motifs.get(&m.diagnosis_code) {
                planted.push((m.diagnosis_code.clone(), Modality::Diagnosis, dx));
                planted.push((m.medication_code.clone(), Modality::Medication, rx));
            }
        }
        for (code, m, first) in &planted {
            events.push(EventRecord::new(*first, *m, code.clone(), Payload::Code));
            let yrs = (end - first) as f64 / MINUTES_PER_YEAR;
            let k = self.poisson(cfg.planted_recurrence_per_year * yrs);
            for _ in 0..k {
                let t = self.uniform_time(first + 1, end);
                events.push(EventRecord::new(t, *m, code.clone(), Payload::Code));
            }
        }

        // Unstructured payloads from the signal codes active at the event time.
        let mut activation: BTreeMap<&str, i64> = BTreeMap::new();
        for (c, &t) in trigger_onsets.iter().chain(endpoints.iter()) {
            activation.insert(c, t);
        }
        for m in &cfg.motifs {
            if let Some(&(dx, rx)) = motifs.get(&m.diagnosis_code) {
                activation.insert(&m.diagnosis_code, dx);
                activation.insert(&m.medication_code, rx);
            }
        }
        let active_at = |t: i64| -> Vec<usize> {
            world
                .signal_codes
                .iter()
                .enumerate()
                .filter(|(_, c)| activation.get(c.as_str()).is_some_and(|&on| on <= t))
                .map(|(i, _)| i)
                .collect()
        };
        for m in Modality::UNSTRUCTURED {
            let Some(&rate) = cfg.modality_rates.get(&m) else { continue };
            let mat = &world.payload_matrices[&m];
            let n = self.poisson(rate * years);
            for _ in 0..n {
                let t = at_visit(self);
                let active = active_at(t);
                let bias = &mat[mat.len() - 1];
                let v: Vec<f64> = (0..bias.len())
                    .map(|j| {
                        let signal: f64 = active.iter().map(|&i| mat[i][j]).sum();
                        let noise: f64 = self.rng.sample(StandardNormal);
                        bias[j] + signal + cfg.payload_noise_sigma * noise
                    })
                    .collect();
                let source = match m {
                    Modality::NoteText => "NOTE_PROGRESS",
                    Modality::ReportText => "REPORT_RADIOLOGY",
                    _ => "IMAGE_WSI",
                };
                events.push(EventRecord::new(t, m, source, Payload::Dense(v)));
            }
        }

        events.sort_by_key(|e| e.time_min);
        let last = events.last().map(|e| e.time_min).unwrap_or(entry);
        let record = PatientRecord {
            patient_id: id.clone(),
            demographics: Demographics {
                sex,
                ethnicity_vec: eth,
                birth_epoch_min,
                age_at_last_event_min: last,
            },
            events,
            death_time_min: death,
        };
        let truth = PatientTruth {
            patient_id: id,
            entry_min: entry,
            censor_min: censor,
            death_min: death,
            trigger_onsets,
            endpoints,
            motifs,
        };
        (record, truth)
    }
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<GeneratedCohort> {
    cfg.validate()?;
    let world = World::build(cfg);
    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut truths = Vec::with_capacity(cfg.n_patients);
    for index in 0..cfg.n_patients {
        let mut g = PatientGen {
            cfg,
            world: &world,
            rng: ChaCha8Rng::seed_from_u64(seeded_hash(&format!("patient:{index}"), cfg.seed)),
        };
        let (p, t) = g.generate(index);
        patients.push(p);
        truths.push(t);
    }
    Ok(GeneratedCohort {
        patients,
        manifest: CohortManifest {
            config: cfg.clone(),
            world,
            patients: truths,
        },
    })
}

/// Exact generative hazard (per year) of `risk` at `t_min`, read off the record.
pub fn oracle_hazard(p: &PatientRecord, t_min: i64, cfg: &CohortConfig, risk: &PlantedRisk) -> Result<f64> {
    if t_min < 0 || t_min > cfg.horizon_min() {
        return Err(CoreError::BeyondHorizon {
            t_min,
            horizon_min: cfg.horizon_min(),
        });
    }
    let lag = (risk.activation_lag_days * MINUTES_PER_DAY as f64).round() as i64;
    let mults = cfg.trigger_multipliers();
    let mut h = risk.baseline_hazard_per_year;
    for t in &risk.triggers {
        let first = p
            .events
            .iter()
            .find(|e| e.source_code == t.code)
            .map(|e| e.time_min);
        if first.is_some_and(|f| f + lag <= t_min) {
            h *= mults[&t.code];
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortConfig {
        CohortConfig::standard(n, 11)
    }

    #[test]
    fn empty_cohort() {
        let c = generate_cohort(&small(0)).unwrap();
        assert!(c.patients.is_empty());
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = generate_cohort(&small(30)).unwrap();
        let b = generate_cohort(&small(30)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(50)).unwrap();
        assert_eq!(&c.patients[..30], &a.patients[..]);
    }

    #[test]
    fn records_validate() {
        let cfg = small(40);
        let c = generate_cohort(&cfg).unwrap();
        for p in &c.patients {
            let r = crate::domain::validate_patient(p, &cfg.dense_dims());
            assert!(r.is_clean(), "{:?}", r.violations);
        }
    }

    #[test]
    fn manifest_matches_events() {
        let cfg = small(200);
        let c = generate_cohort(&cfg).unwrap();
        for (p, t) in c.patients.iter().zip(&c.manifest.patients) {
            for (code, &on) in &t.trigger_onsets {
                let first = p.events.iter().find(|e| &e.source_code == code).unwrap();
                assert_eq!(first.time_min, on);
            }
            for (code, &at) in &t.endpoints {
                if code == DEATH {
                    assert_eq!(p.death_time_min, Some(at));
                } else {
                    let first = p.events.iter().find(|e| &e.source_code == code).unwrap();
                    assert_eq!(first.time_min, at);
                }
            }
        }
    }

    #[test]
    fn oracle_product_rule() {
        let mut cfg = small(0);
        cfg.planted = vec![PlantedRisk {
            endpoint_code: "EP".into(),
            baseline_hazard_per_year: 0.1,
            triggers: vec![
                Trigger { code: "T2".into(), modality: Modality::Diagnosis, prevalence: 0.5, multiplier: 2.0 },
                Trigger { code: "T3".into(), modality: Modality::Diagnosis, prevalence: 0.5, multiplier: 3.0 },
            ],
            activation_lag_days: 0.0,
        }];
        let risk = cfg.planted[0].clone();
        let mut p = generate_cohort(&CohortConfig { n_patients: 1, ..cfg.clone() })
            .unwrap()
            .patients
            .remove(0);
        p.events = vec![
            EventRecord::new(100, Modality::Diagnosis, "X", Payload::Code),
            EventRecord::new(200, Modality::Diagnosis, "T2", Payload::Code),
            EventRecord::new(300, Modality::Diagnosis, "T3", Payload::Code),
        ];
        assert!((oracle_hazard(&p, 50, &cfg, &risk).unwrap() - 0.1).abs() < 1e-15);
        assert!((oracle_hazard(&p, 250, &cfg, &risk).unwrap() - 0.2).abs() < 1e-15);
        assert!((oracle_hazard(&p, 300, &cfg, &risk).unwrap() - 0.6).abs() < 1e-12);
        assert!(oracle_hazard(&p, cfg.horizon_min() + 1, &cfg, &risk).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small(1);
        cfg.modality_rates.insert(Modality::Lab, 0.0);
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = small(1);
        cfg.planted[0].triggers[0].multiplier = -1.0;
        assert!(generate_cohort(&cfg).is_err());
    }
}

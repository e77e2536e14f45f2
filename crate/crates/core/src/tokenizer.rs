//! Structured-value preprocessing: sign-log transform, percentile-anchored
//! equal-width binning, categorical canonicalization, and vocabulary
//! construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{EventRecord, Modality, Payload, PatientRecord};
use crate::error::{CoreError, Result};
use crate::vocab::{TokenKey, Vocabulary};

pub const N_BINS: usize = 10;
/// Bin used for every value of a constant-valued code.
pub const CONSTANT_BIN: u8 = 4;
/// Reserved label for answers missing from the synonym table.
pub const OTHER: &str = "OTHER";

/// `sign(x) * ln(|x| + 1)`.
pub fn transform_value(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(CoreError::NonFinite(x));
    }
    Ok(x.signum() * x.abs().ln_1p())
}

/// Linear interpolation between order statistics of a sorted sample,
/// position `q * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub code: String,
    /// 11 ascending edges in transformed space; `edges[1]` and `edges[9]`
    /// are the 2.5th and 97.5th percentiles.
    pub edges: Vec<f64>,
    pub p2_5: f64,
    pub p97_5: f64,
    /// Constant-valued code: every value maps to [`CONSTANT_BIN`].
    #[serde(default)]
    pub constant: bool,
}

impl BinSpec {
    fn from_percentiles(code: &str, lo: f64, hi: f64) -> Self {
        let w = (hi - lo) / 8.0;
        let mut edges = Vec::with_capacity(N_BINS + 1);
        edges.push(lo - w);
        for i in 0..=8 {
            edges.push(if i == 8 { hi } else { lo + w * i as f64 });
        }
        edges.push(hi + w);
        BinSpec {
            code: code.to_string(),
            edges,
            p2_5: lo,
            p97_5: hi,
            constant: false,
        }
    }

    /// Single-bin spec for a code whose values never vary.
    pub fn constant(code: &str, value: f64) -> Self {
        let t = transform_value(value).unwrap_or(0.0);
        let mut s = Self::from_percentiles(code, t - 0.5, t + 0.5);
        s.constant = true;
        s
    }

    pub fn width(&self) -> f64 {
        (self.p97_5 - self.p2_5) / 8.0
    }
}

/// Fits the ten-bin spec on raw values.
pub fn fit_bins(code: &str, values: &[f64]) -> Result<BinSpec> {
    let mut t = values.iter().map(|&x| transform_value(x)).collect::<Result<Vec<_>>>()?;
    t.sort_by(f64::total_cmp);
    let distinct = t.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!t.is_empty());
    if distinct == 1 {
        return Err(CoreError::Degenerate { code: code.to_string() });
    }
    if distinct < 2 {
        return Err(CoreError::TooFewValues {
            code: code.to_string(),
            distinct,
        });
    }
    let lo = percentile_sorted(&t, 0.025);
    let hi = percentile_sorted(&t, 0.975);
    if hi <= lo {
        // Distinct values exist but the central 95% is a single point.
        return Err(CoreError::Degenerate { code: code.to_string() });
    }
    Ok(BinSpec::from_percentiles(code, lo, hi))
}

/// Like [`fit_bins`], but degenerate codes fall back to a single-bin spec.
/// The degenerate error is returned alongside so callers can log it.
pub fn fit_bins_lenient(code: &str, values: &[f64]) -> Result<(BinSpec, Option<CoreError>)> {
    match fit_bins(code, values) {
        Ok(s) => Ok((s, None)),
        Err(e @ CoreError::Degenerate { .. }) => {
            let v = values.iter().copied().find(|v| v.is_finite()).unwrap_or(0.0);
            Ok((BinSpec::constant(code, v), Some(e)))
        }
        Err(e) => Err(e),
    }
}

/// Bin index in `0..10`; intervals are half-open `[lo, hi)`.
pub fn assign_bin(spec: &BinSpec, x: f64) -> Result<u8> {
    if x.is_nan() {
        return Err(CoreError::NonFinite(x));
    }
    if spec.constant {
        return Ok(CONSTANT_BIN);
    }
    let t = if x.is_infinite() { x } else { transform_value(x)? };
    if t < spec.edges[1] {
        return Ok(0);
    }
    if t >= spec.edges[9] {
        return Ok(9);
    }
    // Largest central bin whose lower edge is <= t.
    let k = spec.edges[1..9].partition_point(|&e| e <= t);
    Ok(k as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub code: String,
    pub canonical_labels: Vec<String>,
    /// Normalized raw string -> canonical label.
    pub synonym_table: BTreeMap<String, String>,
}

fn normalize_raw(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Rule table mapping free-text answers to canonical labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynonymRules {
    pub rules: BTreeMap<String, Vec<String>>,
}

impl Default for SynonymRules {
    fn default() -> Self {
        let mut rules = BTreeMap::new();
        let mut add = |label: &str, syn: &[&str]| {
            rules.insert(label.to_string(), syn.iter().map(|s| s.to_string()).collect());
        };
        add("Positive", &["pos", "positive", "+", "detected", "reactive"]);
        add("Negative", &["neg", "negative", "-", "not detected", "nonreactive"]);
        add("Admitted", &["admitted", "admit"]);
        add("Discharged", &["discharged", "discharge"]);
        SynonymRules { rules }
    }
}

impl SynonymRules {
    fn lookup(&self) -> HashMap<String, String> {
        let mut m = HashMap::new();
        for (label, syns) in &self.rules {
            m.insert(normalize_raw(label), label.clone());
            for s in syns {
                m.insert(normalize_raw(s), label.clone());
            }
        }
        m
    }
}

impl CategoryMap {
    /// Canonical inventory for `code`: rule labels matched by at least one observed answer.
    pub fn fit(code: &str, raw_values: &[&str], rules: &SynonymRules) -> Self {
        let lookup = rules.lookup();
        let mut labels = BTreeSet::new();
        let mut synonym_table = BTreeMap::new();
        for raw in raw_values {
            if let Some(label) = lookup.get(&normalize_raw(raw)) {
                labels.insert(label.clone());
            }
        }
        for (syn, label) in &lookup {
            if labels.contains(label) {
                synonym_table.insert(syn.clone(), label.clone());
            }
        }
        let mut canonical_labels: Vec<String> = labels.into_iter().collect();
        canonical_labels.push(OTHER.to_string());
        CategoryMap {
            code: code.to_string(),
            canonical_labels,
            synonym_table,
        }
    }
}

/// Case-folded, trimmed lookup; unknown answers map to [`OTHER`].
pub fn canonicalize_category<'a>(map: &'a CategoryMap, raw: &str) -> &'a str {
    map.synonym_table
        .get(&normalize_raw(raw))
        .map(String::as_str)
        .unwrap_or(OTHER)
}

/// Per-code conversion to the common unit; identity unless a factor is registered.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitTable {
    pub factors: BTreeMap<String, f64>,
}

impl UnitTable {
    pub fn convert(&self, code: &str, x: f64) -> f64 {
        self.factors.get(code).map_or(x, |f| x * f)
    }
}

/// Everything fitted on the training split that tokenization needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpecs {
    pub bins: BTreeMap<String, BinSpec>,
    pub categories: BTreeMap<String, CategoryMap>,
    pub subdomain_map: BTreeMap<String, String>,
    #[serde(default)]
    pub units: UnitTable,
    /// Codes whose values were constant in training.
    #[serde(default)]
    pub degenerate_codes: Vec<String>,
}

impl TokenizerSpecs {
    /// Fits bins and category maps on the given (training) patients.
    pub fn fit(
        patients: &[&PatientRecord],
        rules: &SynonymRules,
        subdomain_map: &BTreeMap<String, String>,
        units: UnitTable,
    ) -> Result<Self> {
        let mut numeric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut categorical: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for p in patients {
            for e in &p.events {
                match &e.payload {
                    Payload::Numeric(x) => numeric
                        .entry(&e.source_code)
                        .or_default()
                        .push(units.convert(&e.source_code, *x)),
                    Payload::Category(s) => categorical.entry(&e.source_code).or_default().push(s),
                    _ => {}
                }
            }
        }
        let mut specs = TokenizerSpecs {
            subdomain_map: subdomain_map.clone(),
            units,
            ..Default::default()
        };
        for (code, values) in numeric {
            let (spec, err) = fit_bins_lenient(code, &values)?;
            if err.is_some() {
                specs.degenerate_codes.push(code.to_string());
            }
            specs.bins.insert(code.to_string(), spec);
        }
        for (code, raws) in categorical {
            specs
                .categories
                .insert(code.to_string(), CategoryMap::fit(code, &raws, rules));
        }
        Ok(specs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Builds the vocabulary: one token per diagnosis and medication code, ten
/// per binned numeric code, one per (code, canonical label) for categorical
/// codes. Ordering is deterministic: modality, then code, then key.
pub fn build_vocabulary(patients: &[&PatientRecord], specs: &TokenizerSpecs) -> Result<Vocabulary> {
    let mut seen: BTreeSet<(Modality, String, u8)> = BTreeSet::new();
    for p in patients {
        for e in &p.events {
            if !e.modality.is_structured() {
                continue;
            }
            let kind = match e.payload {
                Payload::Numeric(_) => 1,
                Payload::Category(_) => 2,
                _ => 0,
            };
            seen.insert((e.modality, e.source_code.clone(), kind));
        }
    }
    let mut vocab = Vocabulary::default();
    for (modality, code, kind) in seen {
        let class = specs.subdomain_map.get(&code).cloned();
        if modality.has_subdomain() && class.is_none() {
            return Err(CoreError::MissingSubdomain { modality, code });
        }
        match kind {
            1 => {
                if !specs.bins.contains_key(&code) {
                    return Err(CoreError::MissingSpec { modality, code });
                }
                for b in 0..N_BINS as u8 {
                    vocab.push(modality, code.clone(), TokenKey::Bin(b), class.clone())?;
                }
            }
            2 => {
                let map = specs
                    .categories
                    .get(&code)
                    .ok_or_else(|| CoreError::MissingSpec { modality, code: code.clone() })?;
                for label in &map.canonical_labels {
                    vocab.push(modality, code.clone(), TokenKey::Category(label.clone()), class.clone())?;
                }
            }
            _ => {
                vocab.push(modality, code.clone(), TokenKey::Code, class)?;
            }
        }
    }
    Ok(vocab)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizeStats {
    pub tokenized: usize,
    /// Structured events whose code has no vocabulary entry (unseen in training).
    pub dropped_unknown: usize,
}

fn token_key(e: &EventRecord, specs: &TokenizerSpecs) -> Result<Option<TokenKey>> {
    Ok(match &e.payload {
        Payload::Code => Some(TokenKey::Code),
        Payload::Numeric(x) => match specs.bins.get(&e.source_code) {
            Some(spec) => Some(TokenKey::Bin(assign_bin(spec, specs.units.convert(&e.source_code, *x))?)),
            None => None,
        },
        Payload::Category(raw) => specs
            .categories
            .get(&e.source_code)
            .map(|m| TokenKey::Category(canonicalize_category(m, raw).to_string())),
        Payload::Token(_) | Payload::Dense(_) => None,
    })
}

/// Rewrites raw structured payloads to tokens. Unknown codes are dropped and
/// counted; out-of-range values land in the extreme bins.
pub fn tokenize_patient(
    p: &PatientRecord,
    vocab: &Vocabulary,
    specs: &TokenizerSpecs,
    stats: &mut TokenizeStats,
) -> Result<PatientRecord> {
    let mut out = p.clone();
    out.events.clear();
    for e in &p.events {
        if !e.modality.is_structured() || matches!(e.payload, Payload::Token(_)) {
            out.events.push(e.clone());
            continue;
        }
        match token_key(e, specs)?.and_then(|k| vocab.lookup(&e.source_code, &k)) {
            Some(id) => {
                stats.tokenized += 1;
                out.events.push(EventRecord {
                    payload: Payload::Token(id),
                    ..e.clone()
                });
            }
            None => stats.dropped_unknown += 1,
        }
    }
    Ok(out)
}

/// A cohort tokenized with specs and vocabulary fitted on its training subset.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCohort {
    pub specs: TokenizerSpecs,
    pub vocab: Vocabulary,
    pub patients: Vec<PatientRecord>,
    pub stats: TokenizeStats,
}

/// Fits specs and vocabulary on the patients flagged in `is_train`, then
/// tokenizes every patient.
pub fn fit_and_tokenize(
    patients: &[PatientRecord],
    is_train: &[bool],
    subdomain_map: &BTreeMap<String, String>,
) -> Result<TokenizedCohort> {
    let train: Vec<&PatientRecord> = patients
        .iter()
        .zip(is_train)
        .filter_map(|(p, &t)| t.then_some(p))
        .collect();
    let specs = TokenizerSpecs::fit(&train, &SynonymRules::default(), subdomain_map, UnitTable::default())?;
    let vocab = build_vocabulary(&train, &specs)?;
    let mut stats = TokenizeStats::default();
    let patients = patients
        .iter()
        .map(|p| tokenize_patient(p, &vocab, &specs, &mut stats))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenizedCohort {
        specs,
        vocab,
        patients,
        stats,
    })
}

//! The discrete token space shared by the tokenizer and the encoder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Modality, TokenId};
use crate::error::{CoreError, Result};

pub const VOCAB_SCHEMA_VERSION: u32 = 1;

/// What distinguishes tokens sharing a source code.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKey {
    /// Diagnosis or medication code; the code alone is the token.
    Code,
    Bin(u8),
    Category(String),
}

impl std::fmt::Display for TokenKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TokenKey::Code => Ok(()),
            TokenKey::Bin(b) => write!(f, "bin{b}"),
            TokenKey::Category(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token_id: TokenId,
    pub modality: Modality,
    pub code: String,
    pub key: TokenKey,
    pub subdomain_class: Option<String>,
}

impl VocabEntry {
    pub fn label(&self) -> String {
        match &self.key {
            TokenKey::Code => self.code.clone(),
            k => format!("{}:{}", self.code, k),
        }
    }
}

/// Decoding group: a modality, refined by subdomain class for measurements.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DecodeGroup {
    pub modality: Modality,
    pub subdomain_class: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<(String, TokenKey), TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    schema_version: u32,
    size: usize,
    entries: Vec<VocabEntry>,
}

impl Vocabulary {
    /// Builds from entries; ids are re-assigned densely in the given order.
    pub fn from_entries(entries: impl IntoIterator<Item = VocabEntry>) -> Result<Self> {
        let mut v = Vocabulary::default();
        for e in entries {
            v.push(e.modality, e.code, e.key, e.subdomain_class)?;
        }
        Ok(v)
    }

    /// Appends a token, returning the existing id if `(code, key)` is already present.
    pub fn push(
        &mut self,
        modality: Modality,
        code: String,
        key: TokenKey,
        subdomain_class: Option<String>,
    ) -> Result<TokenId> {
        if let Some(&id) = self.index.get(&(code.clone(), key.clone())) {
            return Ok(id);
        }
        if modality.has_subdomain() && subdomain_class.is_none() {
            return Err(CoreError::MissingSubdomain { modality, code });
        }
        let token_id = self.entries.len() as TokenId;
        self.index.insert((code.clone(), key.clone()), token_id);
        self.entries.push(VocabEntry {
            token_id,
            modality,
            code,
            key,
            subdomain_class,
        });
        Ok(token_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn get(&self, id: TokenId) -> Option<&VocabEntry> {
        self.entries.get(id as usize)
    }

    pub fn lookup(&self, code: &str, key: &TokenKey) -> Option<TokenId> {
        self.index.get(&(code.to_string(), key.clone())).copied()
    }

    pub fn decode_group(&self, id: TokenId) -> Option<DecodeGroup> {
        self.get(id).map(|e| DecodeGroup {
            modality: e.modality,
            subdomain_class: if e.modality.has_subdomain() {
                e.subdomain_class.clone()
            } else {
                None
            },
        })
    }

    /// Token ids per decoding group, ascending.
    pub fn decode_groups(&self) -> BTreeMap<DecodeGroup, Vec<TokenId>> {
        let mut groups: BTreeMap<DecodeGroup, Vec<TokenId>> = BTreeMap::new();
        for e in &self.entries {
            let g = self.decode_group(e.token_id).expect("entry id in range");
            groups.entry(g).or_default().push(e.token_id);
        }
        groups
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            schema_version: VOCAB_SCHEMA_VERSION,
            size: self.entries.len(),
            entries: self.entries.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        if f.schema_version != VOCAB_SCHEMA_VERSION {
            return Err(CoreError::SchemaVersion {
                found: f.schema_version,
                expected: VOCAB_SCHEMA_VERSION,
            });
        }
        let v = Vocabulary::from_entries(f.entries)?;
        if v.len() != f.size {
            return Err(CoreError::Format(format!(
                "vocabulary declares {} entries, found {}",
                f.size,
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vocabulary {
        let mut v = Vocabulary::default();
        v.push(Modality::Diagnosis, "D1".into(), TokenKey::Code, None).unwrap();
        v.push(Modality::Diagnosis, "D2".into(), TokenKey::Code, None).unwrap();
        for b in 0..10 {
            v.push(Modality::Lab, "L1".into(), TokenKey::Bin(b), Some("CHEM".into()))
                .unwrap();
        }
        v.push(
            Modality::Lab,
            "L2".into(),
            TokenKey::Category("Positive".into()),
            Some("MICRO".into()),
        )
        .unwrap();
        v
    }

    #[test]
    fn lookup_and_id_are_inverse() {
        let v = sample();
        for e in v.entries() {
            assert_eq!(v.lookup(&e.code, &e.key), Some(e.token_id));
            assert_eq!(v.get(e.token_id).unwrap(), e);
        }
    }

    #[test]
    fn duplicate_push_returns_existing() {
        let mut v = sample();
        let n = v.len();
        let id = v.push(Modality::Diagnosis, "D2".into(), TokenKey::Code, None).unwrap();
        assert_eq!(id, 1);
        assert_eq!(v.len(), n);
    }

    #[test]
    fn measurement_without_class_rejected() {
        let mut v = Vocabulary::default();
        assert!(v.push(Modality::Vital, "HR".into(), TokenKey::Bin(0), None).is_err());
    }

    #[test]
    fn groups_split_by_subdomain() {
        let g = sample().decode_groups();
        assert_eq!(g.len(), 3);
        let lab_chem = DecodeGroup {
            modality: Modality::Lab,
            subdomain_class: Some("CHEM".into()),
        };
        assert_eq!(g[&lab_chem].len(), 10);
    }

    #[test]
    fn json_round_trip() {
        let v = sample();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back.entries(), v.entries());
    }
}

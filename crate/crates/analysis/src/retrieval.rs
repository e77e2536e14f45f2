//! Exact cosine-similarity patient search and fold-wise Acc@k.

use std::collections::{BTreeSet, HashMap};

use chronoscope_core::{Modality, PatientRecord, Payload};
use chronoscope_encoder::{embed_patients, EncoderParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{AnalysisError, Result};

/// Unit-norm embedding rows with their patient ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchIndex {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub as_of_min: Option<i64>,
    pub prompt: Option<Modality>,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SearchIndex {
    pub fn from_vectors(ids: Vec<String>, vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        let rows = ids
            .iter()
            .zip(vectors)
            .map(|(id, v)| {
                if v.len() != dim {
                    return Err(AnalysisError::Dimension {
                        expected: dim,
                        found: v.len(),
                    });
                }
                unit(v).ok_or_else(|| AnalysisError::ZeroEmbedding(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SearchIndex {
            ids,
            rows,
            as_of_min: None,
            prompt: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Embeds each patient with its history truncated at `as_of_min` (patients who
/// died earlier keep their full record) and normalizes the rows.
pub fn build_index(
    patients: &[PatientRecord],
    params: &EncoderParams,
    as_of_min: i64,
    prompt: Modality,
) -> Result<SearchIndex> {
    let queries: Vec<(&PatientRecord, i64)> = patients.iter().map(|p| (p, as_of_min)).collect();
    let vectors = embed_patients(&queries, params, prompt)?;
    let mut index = SearchIndex::from_vectors(patients.iter().map(|p| p.patient_id.clone()).collect(), &vectors)?;
    index.as_of_min = Some(as_of_min);
    index.prompt = Some(prompt);
    Ok(index)
}

/// Top-`k` rows among `candidates` by cosine similarity; ties go to the smaller id.
pub fn knn_among(index: &SearchIndex, query: &[f64], k: usize, candidates: &[usize]) -> Result<Vec<usize>> {
    if query.len() != index.dim() {
        return Err(AnalysisError::Dimension {
            expected: index.dim(),
            found: query.len(),
        });
    }
    let q = unit(query).ok_or(AnalysisError::ZeroQuery)?;
    if k > candidates.len() {
        return Err(AnalysisError::KTooLarge {
            k,
            n: candidates.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (dot(&q, &index.rows[i]), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| index.ids[a.1].cmp(&index.ids[b.1])));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Ranked ids of the `k` nearest rows.
pub fn knn_query(index: &SearchIndex, query: &[f64], k: usize) -> Result<Vec<String>> {
    let all: Vec<usize> = (0..index.len()).collect();
    Ok(knn_among(index, query, k, &all)?.into_iter().map(|i| index.ids[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub n_queries: usize,
    pub accuracy: f64,
    /// Share of the remaining candidates that belong to the cohort.
    pub prevalence: f64,
    pub hits: u64,
    pub trials: u64,
    /// One-sided binomial tail `P(X >= hits)` at the fold prevalence.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub sd: f64,
    pub cohort_size: usize,
    pub index_size: usize,
    /// Set when the cohort has fewer than `n_folds * k` members.
    pub small_cohort: bool,
}

/// Splits `cohort` into `n_folds` seeded folds. Each fold's members are removed
/// from the index and queried against the rest; Acc@k is the mean share of
/// their neighbours that belong to the cohort.
pub fn evaluate_retrieval(
    index: &SearchIndex,
    cohort: &[String],
    k: usize,
    n_folds: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let pos: HashMap<&str, usize> = index.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut members: Vec<usize> = cohort
        .iter()
        .map(|c| pos.get(c.as_str()).copied().ok_or_else(|| AnalysisError::NotInIndex(c.clone())))
        .collect::<Result<BTreeSet<_>>>()?
        .into_iter()
        .collect();
    if n_folds == 0 || members.len() < n_folds {
        return Err(AnalysisError::CohortTooSmall {
            size: members.len(),
            folds: n_folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members.shuffle(&mut rng);
    let in_cohort: BTreeSet<usize> = members.iter().copied().collect();
    let folds: Vec<FoldResult> = (0..n_folds)
        .into_par_iter()
        .map(|f| -> Result<FoldResult> {
            let fold = &members[f * members.len() / n_folds..(f + 1) * members.len() / n_folds];
            let held: BTreeSet<usize> = fold.iter().copied().collect();
            let candidates: Vec<usize> = (0..index.len()).filter(|i| !held.contains(i)).collect();
            let mut hits = 0u64;
            for &q in fold {
                let nn = knn_among(index, &index.rows[q], k, &candidates)?;
                hits += nn.iter().filter(|i| in_cohort.contains(i)).count() as u64;
            }
            let trials = (fold.len() * k) as u64;
            let remaining = in_cohort.len() - fold.len();
            let prevalence = remaining as f64 / candidates.len() as f64;
            let p_value = if hits == 0 {
                1.0
            } else {
                Binomial::new(prevalence, trials).map_or(f64::NAN, |b| b.sf(hits - 1))
            };
            Ok(FoldResult {
                n_queries: fold.len(),
                accuracy: hits as f64 / trials as f64,
                prevalence,
                hits,
                trials,
                p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n_folds as f64;
    let sd = if n_folds > 1 {
        (folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / (n_folds - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RetrievalReport {
        k,
        folds,
        mean,
        sd,
        cohort_size: members.len(),
        index_size: index.len(),
        small_cohort: members.len() < n_folds * k,
    })
}

/// Comparator index built from each patient's most recent note payload before
/// `as_of_min`. Patients without a note are skipped.
pub fn last_note_index(patients: &[PatientRecord], as_of_min: i64) -> Result<SearchIndex> {
    let mut ids = Vec::new();
    let mut vecs = Vec::new();
    for p in patients {
        let note = p
            .history_until(as_of_min)
            .iter()
            .rev()
            .find_map(|e| match (&e.payload, e.modality) {
                (Payload::Dense(x), Modality::NoteText) => Some(x.clone()),
                _ => None,
            });
        if let Some(x) = note {
            ids.push(p.patient_id.clone());
            vecs.push(x);
        }
    }
    let mut index = SearchIndex::from_vectors(ids, &vecs)?;
    index.as_of_min = Some(as_of_min);
    index.prompt = Some(Modality::NoteText);
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(rows: &[[f64; 2]]) -> SearchIndex {
        let ids = (0..rows.len()).map(|i| format!("p{i}")).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        SearchIndex::from_vectors(ids, &v).unwrap()
    }

    #[test]
    fn hand_example_order() {
        let index = idx(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.2], [2.0, 0.1]]);
        // Query (1, 0.5): cosines 0.894, 0.447, 0.949, -0.783, 0.916.
        let got = knn_query(&index, &[1.0, 0.5], 5).unwrap();
        assert_eq!(got, vec!["p2", "p4", "p0", "p1", "p3"]);
    }

    #[test]
    fn ties_by_id_and_self_first() {
        let index = idx(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        assert_eq!(knn_query(&index, &[1.0, 0.0], 2).unwrap(), vec!["p0", "p1"]);
        assert_eq!(knn_query(&index, &index.rows[2].clone(), 1).unwrap(), vec!["p2"]);
        assert!(knn_query(&index, &[0.0, 0.0], 1).is_err());
        assert!(knn_query(&index, &[1.0, 0.0], 4).is_err());
    }

    #[test]
    fn rows_unit_norm() {
        let index = idx(&[[3.0, 4.0], [0.1, 0.0]]);
        for r in &index.rows {
            assert!((dot(r, r) - 1.0).abs() < 1e-12);
        }
        assert!(SearchIndex::from_vectors(vec!["z".into()], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn whole_index_cohort_is_perfect() {
        let rows: Vec<[f64; 2]> = (0..30).map(|i| [(i as f64).cos(), (i as f64).sin()]).collect();
        let index = idx(&rows);
        let r = evaluate_retrieval(&index, &index.ids.clone(), 5, 5, 1).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.folds.iter().map(|f| f.n_queries).sum::<usize>(), 30);
    }
}

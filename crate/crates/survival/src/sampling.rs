//! Case-cohort subsampling of training instances.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SurvivalError};

pub const DEFAULT_MAX_RATIO: usize = 4;

/// Keeps every event and a uniform subset of censored instances so that
/// censored:events is at most `max_ratio`. Returns sorted indices.
pub fn case_cohort_sample(events: &[bool], max_ratio: usize, seed: u64) -> Result<Vec<usize>> {
    let (cases, censored): (Vec<usize>, Vec<usize>) = (0..events.len()).partition(|&i| events[i]);
    if cases.is_empty() {
        return Err(SurvivalError::NoEvents);
    }
    let cap = cases.len().saturating_mul(max_ratio);
    let mut keep = cases;
    if censored.len() <= cap {
        keep.extend(censored);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        keep.extend(sample(&mut rng, censored.len(), cap).into_iter().map(|k| censored[k]));
    }
    keep.sort_unstable();
    Ok(keep)
}

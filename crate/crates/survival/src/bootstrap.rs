//! Nonparametric bootstrap intervals and the unpaired bootstrap test.

use chronoscope_core::seeded_hash;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvivalError};

pub const DEFAULT_RESAMPLES: usize = 100;
/// Largest tolerated fraction of undefined resamples.
pub const MAX_UNDEFINED_FRACTION: f64 = 0.10;

/// Indices drawn with replacement from `0..n` for resample `b`.
pub fn resample_indices(n: usize, b: usize, stream: u32, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(&format!("boot:{b}:{stream}"), seed));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSample {
    pub point: f64,
    pub values: Vec<f64>,
    pub n_undefined: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn check_undefined(undefined: usize, total: usize) -> Result<()> {
    if undefined as f64 > MAX_UNDEFINED_FRACTION * total as f64 {
        return Err(SurvivalError::TooManyUndefined { undefined, total });
    }
    Ok(())
}

/// Evaluates `metric` on the full index set and on `n_boot` resamples. A
/// resample whose metric errors is skipped and counted.
pub fn bootstrap_ci<F>(n: usize, n_boot: usize, seed: u64, metric: F) -> Result<BootstrapSample>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 || n_boot == 0 {
        return Err(SurvivalError::Empty);
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let outcomes: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| metric(&resample_indices(n, b, 0, seed)).ok().filter(|v| v.is_finite()))
        .collect();
    let mut values: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let n_undefined = n_boot - values.len();
    check_undefined(n_undefined, n_boot)?;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    values.shrink_to_fit();
    Ok(BootstrapSample {
        point,
        ci_low: percentile(&sorted, 0.025),
        ci_high: percentile(&sorted, 0.975),
        values,
        n_undefined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub observed_diff: f64,
    pub n_resamples: usize,
    pub n_undefined: usize,
}

/// Two-sided unpaired bootstrap test of `metric_a - metric_b`. Each arm is
/// resampled independently; both stream assignments are used so the test is
/// symmetric in its arguments. The null distribution is the centered set of
/// bootstrap differences.
pub fn bootstrap_significance<A, B>(
    n: usize,
    n_boot: usize,
    seed: u64,
    metric_a: A,
    metric_b: B,
) -> Result<SignificanceResult>
where
    A: Fn(&[usize]) -> Result<f64> + Sync,
    B: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 || n_boot == 0 {
        return Err(SurvivalError::Empty);
    }
    let all: Vec<usize> = (0..n).collect();
    let observed_diff = metric_a(&all)? - metric_b(&all)?;
    let pairs: Vec<[Option<f64>; 2]> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let s0 = resample_indices(n, b, 0, seed);
            let s1 = resample_indices(n, b, 1, seed);
            let eval = |x: &[usize], y: &[usize]| -> Option<f64> {
                let d = metric_a(x).ok()? - metric_b(y).ok()?;
                d.is_finite().then_some(d)
            };
            [eval(&s0, &s1), eval(&s1, &s0)]
        })
        .collect();
    let diffs: Vec<f64> = pairs.iter().flatten().flatten().copied().collect();
    let total = 2 * n_boot;
    let n_undefined = total - diffs.len();
    check_undefined(n_undefined, total)?;
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let extreme = diffs.iter().filter(|&&d| (d - mean).abs() >= observed_diff.abs()).count();
    Ok(SignificanceResult {
        p_value: (1 + extreme) as f64 / (1 + diffs.len()) as f64,
        observed_diff,
        n_resamples: diffs.len(),
        n_undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 10.0, 20.0];
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.25), 5.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
    }

    #[test]
    fn constant_metric_zero_width() {
        let r = bootstrap_ci(50, 100, 3, |_| Ok(0.7)).unwrap();
        assert_eq!((r.ci_low, r.ci_high), (0.7, 0.7));
    }

    #[test]
    fn same_seed_same_result() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64).collect();
        let mean = |idx: &[usize]| Ok(idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64);
        assert_eq!(bootstrap_ci(200, 50, 9, mean).unwrap(), bootstrap_ci(200, 50, 9, mean).unwrap());
        assert_ne!(bootstrap_ci(200, 50, 9, mean).unwrap(), bootstrap_ci(200, 50, 10, mean).unwrap());
    }

    #[test]
    fn undefined_resamples_counted_then_rejected() {
        let r = bootstrap_ci(10, 100, 0, |idx| {
            if idx.iter().filter(|&&i| i == 0).count() >= 2 {
                Err(SurvivalError::Undefined("x".into()))
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        assert!(matches!(r, SurvivalError::TooManyUndefined { .. }));
    }

    #[test]
    fn identical_arms_p_one() {
        let x: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let m = |idx: &[usize]| Ok(idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64);
        let r = bootstrap_significance(100, 100, 1, m, m).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn swap_symmetric() {
        let x: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let a = |idx: &[usize]| Ok(idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64);
        let b = |idx: &[usize]| Ok(idx.iter().map(|&i| x[i] * 1.1).sum::<f64>() / idx.len() as f64);
        let ab = bootstrap_significance(100, 100, 4, a, b).unwrap();
        let ba = bootstrap_significance(100, 100, 4, b, a).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
    }
}

//! Principal components of centered (unscaled) features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvivalError};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `n_components x E`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Set when fewer components than requested had nonzero variance.
    pub rank_deficient: bool,
}

impl PcaProjection {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(SurvivalError::Dimension {
                expected: self.mean.len(),
                found: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect())
    }

    pub fn project_all(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter().map(|r| self.project(r)).collect()
    }
}

/// Fits on training rows only. Each component's largest-magnitude entry is positive.
pub fn fit_pca(x: &[Vec<f64>], n_components: usize) -> Result<PcaProjection> {
    if x.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if x.len() <= n_components {
        return Err(SurvivalError::TooFewSamples {
            n_samples: x.len(),
            n_components,
        });
    }
    let e = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != e) {
        return Err(SurvivalError::Dimension {
            expected: e,
            found: r.len(),
        });
    }
    let n = x.len();
    let mut mean = vec![0.0; e];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, e, |i, j| x[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let want = n_components.min(e);
    let mut components = Vec::with_capacity(want);
    let mut explained_variance = Vec::with_capacity(want);
    for &k in order.iter().take(want) {
        let ev = eig.eigenvalues[k];
        if top <= 0.0 || ev <= RANK_TOL * top {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(v);
        explained_variance.push(ev);
    }
    Ok(PcaProjection {
        mean,
        rank_deficient: components.len() < n_components,
        components,
        explained_variance,
    })
}

//! Discrete-time hazard model: bin edges, likelihood, and a logistic-hazard
//! head trained on fixed feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};

/// Ascending bin edges in days, ending at infinity.
pub fn make_time_bins(tau_days: f64) -> Vec<f64> {
    if tau_days > 365.0 {
        let mut v: Vec<f64> = (0..=10).map(|i| 365.0 * i as f64).collect();
        v.push(f64::INFINITY);
        v
    } else {
        vec![0.0, 7.0, 15.0, 30.0, 90.0, 180.0, 365.0, f64::INFINITY]
    }
}

/// 1-based bin `j` with `edges[j-1] <= d < edges[j]`.
pub fn observed_bin(edges: &[f64], duration_days: f64) -> usize {
    edges[1..].partition_point(|&e| e <= duration_days) + 1
}

/// Negative log-likelihood of a discrete-time observation. `y` is 1-based.
pub fn discrete_hazard_loss(h: &[f64], y: usize, event: bool) -> Result<f64> {
    if y == 0 || y > h.len() {
        return Err(EncoderError::BinRange { bin: y, n_bins: h.len() });
    }
    if let Some(&bad) = h.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(EncoderError::HazardRange(bad));
    }
    let log_surv = |k: usize| h[..k].iter().map(|v| (1.0 - v).ln()).sum::<f64>();
    Ok(if event {
        -(log_surv(y - 1) + h[y - 1].ln())
    } else {
        -log_surv(y)
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardHeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for HazardHeadConfig {
    fn default() -> Self {
        HazardHeadConfig {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
        }
    }
}

/// Per-bin logistic hazards `h_j = σ(w_j · x + b_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteHazardHead {
    pub edges: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DiscreteHazardHead {
    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn hazards(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| sigmoid(w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b))
            .collect()
    }

    /// Probability of the event by `tau_days`, read at the first edge ≥ τ.
    pub fn risk_at(&self, x: &[f64], tau_days: f64) -> f64 {
        let k = self.edges[1..].partition_point(|&e| e < tau_days) + 1;
        let h = self.hazards(x);
        1.0 - h[..k.min(h.len())].iter().map(|v| 1.0 - v).product::<f64>()
    }

    /// Full-batch Adam on the mean negative log-likelihood plus an L2 penalty.
    pub fn fit(x: &[Vec<f64>], durations: &[f64], events: &[bool], tau_days: f64, cfg: &HazardHeadConfig) -> Self {
        let edges = make_time_bins(tau_days);
        let nb = edges.len() - 1;
        let d = x.first().map_or(0, |r| r.len());
        let mut head = DiscreteHazardHead {
            edges,
            weights: vec![vec![0.0; d]; nb],
            bias: vec![-3.0; nb],
        };
        let n = x.len().max(1) as f64;
        let bins: Vec<usize> = durations.iter().map(|&t| observed_bin(&head.edges, t)).collect();
        let np = nb * (d + 1);
        let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
        for step in 1..=cfg.epochs {
            let mut grad = vec![0.0; np];
            for ((xi, &y), &e) in x.iter().zip(&bins).zip(events) {
                let h = head.hazards(xi);
                // d/da of -ln(1-σ(a)) is σ(a); of -ln σ(a) is σ(a) - 1.
                let last = if e { y } else { y.min(nb) };
                for (j, hj) in h.iter().enumerate().take(last) {
                    let da = if e && j + 1 == y { hj - 1.0 } else { *hj };
                    for (k, xv) in xi.iter().enumerate() {
                        grad[j * (d + 1) + k] += da * xv / n;
                    }
                    grad[j * (d + 1) + d] += da / n;
                }
            }
            for j in 0..nb {
                for k in 0..d {
                    grad[j * (d + 1) + k] += cfg.l2 * head.weights[j][k];
                }
            }
            let (b1, b2): (f64, f64) = (0.9, 0.999);
            for i in 0..np {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let upd = cfg.lr * (m[i] / (1.0 - b1.powi(step as i32))) / ((v[i] / (1.0 - b2.powi(step as i32))).sqrt() + 1e-8);
                let (j, k) = (i / (d + 1), i % (d + 1));
                if k == d {
                    head.bias[j] -= upd;
                } else {
                    head.weights[j][k] -= upd;
                }
            }
        }
        head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_edges() {
        let long = make_time_bins(1095.0);
        assert_eq!(long.len(), 12);
        assert_eq!(long[1], 365.0);
        assert_eq!(long[10], 3650.0);
        assert!(long[11].is_infinite());
        assert_eq!(make_time_bins(90.0), vec![0.0, 7.0, 15.0, 30.0, 90.0, 180.0, 365.0, f64::INFINITY]);
        assert_eq!(make_time_bins(366.0)[1], 365.0);
        assert_eq!(make_time_bins(365.0).len(), 8);
    }

    #[test]
    fn likelihood_values() {
        assert!((discrete_hazard_loss(&[0.5], 1, true).unwrap() - 0.5f64.ln().abs()).abs() < 1e-15);
        let v = discrete_hazard_loss(&[0.1, 0.2], 2, false).unwrap();
        assert!((v + (0.9f64 * 0.8).ln()).abs() < 1e-15);
        assert!((v - 0.3285).abs() < 1e-4);
        assert!(discrete_hazard_loss(&[1.0 - 1e-15], 1, true).unwrap() < 1e-14);
        assert!(discrete_hazard_loss(&[1.0], 1, true).is_err());
        assert!(discrete_hazard_loss(&[0.5], 2, true).is_err());
    }

    #[test]
    fn observed_bins() {
        let e = make_time_bins(90.0);
        assert_eq!(observed_bin(&e, 0.0), 1);
        assert_eq!(observed_bin(&e, 7.0), 2);
        assert_eq!(observed_bin(&e, 400.0), 7);
    }

    #[test]
    fn head_learns_risk_direction() {
        // Feature 1 shortens time to event.
        let mut x = Vec::new();
        let mut t = Vec::new();
        let mut ev = Vec::new();
        for i in 0..200 {
            let high = i % 2 == 0;
            x.push(vec![if high { 1.0 } else { 0.0 }]);
            t.push(if high { 20.0 + i as f64 * 0.1 } else { 300.0 });
            ev.push(high);
        }
        let head = DiscreteHazardHead::fit(&x, &t, &ev, 90.0, &HazardHeadConfig::default());
        assert!(head.risk_at(&[1.0], 90.0) > 0.8);
        assert!(head.risk_at(&[0.0], 90.0) < 0.2);
    }
}

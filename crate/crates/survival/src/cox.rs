//! Ridge-penalized Cox regression with Efron ties and a Breslow baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvivalError};

pub const GRAD_TOL: f64 = 1e-7;
pub const REL_OBJ_TOL: f64 = 1e-9;
pub const MAX_ITERS: usize = 100;
pub const MAX_PENALIZER: f64 = 1e2;
/// Standardized coefficients beyond this magnitude are treated as separation.
pub const SEPARATION_BOUND: f64 = 50.0;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Every penalizer attempted, ending with the one that was accepted.
    pub penalizer_path: Vec<f64>,
    pub dropped_columns: Vec<usize>,
    /// Objective after each accepted Newton step, starting from beta = 0.
    pub objective_trace: Vec<f64>,
}

/// Cumulative baseline hazard with `exp(eta - offset)` used in the risk sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub cum_hazard: Vec<f64>,
    pub offset: f64,
}

impl BaselineHazard {
    /// `H_0(t)` on the offset scale.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cum_hazard[k - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub penalizer: f64,
    pub baseline: Option<BaselineHazard>,
    pub diagnostics: CoxDiagnostics,
}

impl CoxModel {
    /// Linear predictor `beta^T x`.
    pub fn predict_risk(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(SurvivalError::Dimension {
                expected: self.beta.len(),
                found: x.len(),
            });
        }
        Ok(self.beta.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    /// `S(t | x) = exp(-H_0(t) exp(beta^T x))`; 1 everywhere without a baseline.
    pub fn survival(&self, x: &[f64], t: f64) -> Result<f64> {
        let eta = self.predict_risk(x)?;
        Ok(match &self.baseline {
            Some(b) => (-b.at(t) * (eta - b.offset).exp()).exp(),
            None => 1.0,
        })
    }

    /// `1 - S(tau | x)`.
    pub fn event_probability(&self, x: &[f64], tau: f64) -> Result<f64> {
        Ok(1.0 - self.survival(x, tau)?)
    }
}

fn check_rows(x: &[Vec<f64>], durations: &[f64], events: &[bool]) -> Result<usize> {
    if x.len() != durations.len() {
        return Err(SurvivalError::LengthMismatch(x.len(), durations.len()));
    }
    if events.len() != durations.len() {
        return Err(SurvivalError::LengthMismatch(events.len(), durations.len()));
    }
    if x.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let p = x[0].len();
    for row in x {
        if row.len() != p {
            return Err(SurvivalError::Dimension {
                expected: p,
                found: row.len(),
            });
        }
    }
    Ok(p)
}

/// Efron log partial likelihood with its gradient and Hessian.
struct Efron<'a> {
    z: &'a DMatrix<f64>,
    /// Row indices sorted by descending duration.
    order: Vec<usize>,
    durations: &'a [f64],
    events: &'a [bool],
}

impl Efron<'_> {
    fn eval(&self, beta: &DVector<f64>, derivs: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.z.ncols();
        let eta = self.z * beta;
        let shift = eta.max();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut k = 0;
        let n = self.order.len();
        while k < n {
            let t = self.durations[self.order[k]];
            let mut d0 = 0.0;
            let mut d1 = DVector::zeros(p);
            let mut d2 = DMatrix::zeros(p, p);
            let mut n_ev = 0usize;
            while k < n && self.durations[self.order[k]] == t {
                let i = self.order[k];
                let w = (eta[i] - shift).exp();
                let xi = self.z.row(i).transpose();
                s0 += w;
                if derivs {
                    s1.axpy(w, &xi, 1.0);
                    s2.ger(w, &xi, &xi, 1.0);
                }
                if self.events[i] {
                    n_ev += 1;
                    d0 += w;
                    ll += eta[i] - shift;
                    if derivs {
                        grad += &xi;
                        d1.axpy(w, &xi, 1.0);
                        d2.ger(w, &xi, &xi, 1.0);
                    }
                }
                k += 1;
            }
            for l in 0..n_ev {
                let f = l as f64 / n_ev as f64;
                let den = s0 - f * d0;
                ll -= den.ln();
                if derivs {
                    let num1 = &s1 - &d1 * f;
                    let num2 = &s2 - &d2 * f;
                    grad.axpy(-1.0 / den, &num1, 1.0);
                    hess -= num2 / den;
                    hess.ger(1.0 / (den * den), &num1, &num1, 1.0);
                }
            }
        }
        (ll, grad, hess)
    }
}

struct Standardized {
    z: DMatrix<f64>,
    kept: Vec<usize>,
    scale: Vec<f64>,
    dropped: Vec<usize>,
}

fn standardize(x: &[Vec<f64>], p: usize) -> Standardized {
    let n = x.len() as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut scale = Vec::new();
    let mut cols = Vec::new();
    for c in 0..p {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            dropped.push(c);
            continue;
        }
        kept.push(c);
        scale.push(sd);
        cols.push(x.iter().map(|r| (r[c] - mean) / sd).collect::<Vec<_>>());
    }
    let z = DMatrix::from_fn(x.len(), kept.len(), |i, j| cols[j][i]);
    Standardized {
        z,
        kept,
        scale,
        dropped,
    }
}

enum Attempt {
    Converged(DVector<f64>, usize, f64, Vec<f64>),
    Failed,
}

fn newton(lik: &Efron, n: f64, lambda: f64) -> Attempt {
    let p = lik.z.ncols();
    let objective = |b: &DVector<f64>| lik.eval(b, false).0 / n - 0.5 * lambda * b.norm_squared();
    // A finite concave maximum cannot be improved by moving further along its own ray.
    let unbounded = |b: &DVector<f64>| objective(&(b * 2.0)) > objective(b);
    let mut beta = DVector::zeros(p);
    let mut trace = vec![objective(&beta)];
    for iter in 1..=MAX_ITERS {
        let (ll, g, h) = lik.eval(&beta, true);
        let obj = ll / n - 0.5 * lambda * beta.norm_squared();
        let grad = g / n - &beta * lambda;
        let gmax = grad.amax();
        if gmax < GRAD_TOL {
            if unbounded(&beta) {
                return Attempt::Failed;
            }
            return Attempt::Converged(beta, iter - 1, gmax, trace);
        }
        let neg_h = -(h / n) + DMatrix::identity(p, p) * lambda;
        let step = match neg_h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => match neg_h.lu().solve(&grad) {
                Some(s) => s,
                None => return Attempt::Failed,
            },
        };
        let mut s = 1.0;
        let mut next = &beta + &step;
        let mut next_obj = objective(&next);
        let mut halvings = 0;
        while !(next_obj.is_finite() && next_obj >= obj) {
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Attempt::Failed;
            }
            s *= 0.5;
            next = &beta + &step * s;
            next_obj = objective(&next);
        }
        beta = next;
        trace.push(next_obj);
        if beta.amax() > SEPARATION_BOUND {
            return Attempt::Failed;
        }
        let rel = (next_obj - obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        if rel < REL_OBJ_TOL {
            let (_, g, _) = lik.eval(&beta, true);
            let gmax = (g / n - &beta * lambda).amax();
            if unbounded(&beta) {
                return Attempt::Failed;
            }
            return Attempt::Converged(beta, iter, gmax, trace);
        }
    }
    Attempt::Failed
}

/// Maximizes `ll(beta)/n - (lambda/2) |beta_std|^2` over internally standardized
/// features. On failure the penalizer is raised (`max(10 lambda, 1e-4)`) up to
/// [`MAX_PENALIZER`].
pub fn fit_cox(x: &[Vec<f64>], durations: &[f64], events: &[bool], penalizer: f64) -> Result<CoxModel> {
    let p = check_rows(x, durations, events)?;
    if penalizer < 0.0 || !penalizer.is_finite() {
        return Err(SurvivalError::Undefined(format!("penalizer {penalizer}")));
    }
    if !events.iter().any(|&e| e) {
        return Err(SurvivalError::NoEvents);
    }
    let st = standardize(x, p);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]).then(a.cmp(&b)));
    let lik = Efron {
        z: &st.z,
        order,
        durations,
        events,
    };
    let n = x.len() as f64;
    let mut lambda = penalizer;
    let mut path = Vec::new();
    loop {
        path.push(lambda);
        if let Attempt::Converged(b, iterations, grad_norm, trace) = newton(&lik, n, lambda) {
            let mut beta = vec![0.0; p];
            for (j, &c) in st.kept.iter().enumerate() {
                beta[c] = b[j] / st.scale[j];
            }
            return Ok(CoxModel {
                beta,
                penalizer: lambda,
                baseline: None,
                diagnostics: CoxDiagnostics {
                    iterations,
                    grad_norm,
                    converged: true,
                    penalizer_path: path,
                    dropped_columns: st.dropped,
                    objective_trace: trace,
                },
            });
        }
        if lambda >= MAX_PENALIZER {
            return Err(SurvivalError::NonConvergence { path });
        }
        lambda = (lambda * 10.0).max(1e-4).min(MAX_PENALIZER);
    }
}

/// Breslow estimate `dH_0 = d / sum_{at risk} exp(beta^T x)` on a held-out sample.
pub fn estimate_baseline_hazard(
    model: &CoxModel,
    x: &[Vec<f64>],
    durations: &[f64],
    events: &[bool],
) -> Result<CoxModel> {
    check_rows(x, durations, events)?;
    let eta = x.iter().map(|r| model.predict_risk(r)).collect::<Result<Vec<_>>>()?;
    let offset = eta.iter().sum::<f64>() / eta.len() as f64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));
    let mut risk = 0.0;
    let mut rev = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = durations[order[k]];
        let mut d = 0usize;
        while k < order.len() && durations[order[k]] == t {
            let i = order[k];
            risk += (eta[i] - offset).exp();
            d += usize::from(events[i]);
            k += 1;
        }
        if d > 0 {
            if risk <= 0.0 {
                return Err(SurvivalError::EmptyRiskSet(t));
            }
            rev.push((t, d as f64 / risk));
        }
    }
    rev.reverse();
    let mut h = 0.0;
    let (times, cum_hazard) = rev
        .into_iter()
        .map(|(t, dh)| {
            h += dh;
            (t, h)
        })
        .unzip();
    let baseline = BaselineHazard {
        times,
        cum_hazard,
        offset,
    };
    Ok(CoxModel {
        baseline: Some(baseline),
        ..model.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 3) as f64, ((i * 7) % 5) as f64]).collect();
        let t = (0..12).map(|i| (1 + (i * 5) % 7) as f64).collect();
        let e = (0..12).map(|i| i % 4 != 0).collect();
        (x, t, e)
    }

    #[test]
    fn objective_never_decreases() {
        let (x, t, e) = toy();
        let m = fit_cox(&x, &t, &e, 0.0).unwrap();
        for w in m.diagnostics.objective_trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(m.diagnostics.converged);
    }

    #[test]
    fn scale_equivariance() {
        let (x, t, e) = toy();
        let m = fit_cox(&x, &t, &e, 0.0).unwrap();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] * 7.5, r[1]]).collect();
        let ms = fit_cox(&xs, &t, &e, 0.0).unwrap();
        assert!((ms.beta[0] * 7.5 - m.beta[0]).abs() < 1e-6);
        assert!((ms.beta[1] - m.beta[1]).abs() < 1e-6);
    }

    #[test]
    fn translation_leaves_risk_differences() {
        let (x, t, e) = toy();
        let m = fit_cox(&x, &t, &e, 0.0).unwrap();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 100.0, r[1]]).collect();
        let ms = fit_cox(&xs, &t, &e, 0.0).unwrap();
        let r = |m: &CoxModel, x: &[Vec<f64>], i: usize| m.predict_risk(&x[i]).unwrap();
        for i in 1..x.len() {
            let a = r(&m, &x, i) - r(&m, &x, 0);
            let b = r(&ms, &xs, i) - r(&ms, &xs, 0);
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_penalizer_shrinks_to_zero() {
        let (x, t, e) = toy();
        let m = fit_cox(&x, &t, &e, 1e8).unwrap();
        assert!(m.beta.iter().all(|b| b.abs() < 1e-7));
    }

    #[test]
    fn constant_column_dropped() {
        let (x, t, e) = toy();
        let xc: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], 3.0, r[1]]).collect();
        let m = fit_cox(&xc, &t, &e, 0.0).unwrap();
        assert_eq!(m.diagnostics.dropped_columns, vec![1]);
        assert_eq!(m.beta[1], 0.0);
    }

    #[test]
    fn separation_escalates_penalizer() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t: Vec<f64> = (0..10).map(|i| (10 - i) as f64).collect();
        let m = fit_cox(&x, &t, &[true; 10], 0.0).unwrap();
        assert!(m.diagnostics.penalizer_path.len() > 1);
        assert_eq!(m.diagnostics.penalizer_path[1], 1e-4);
        assert!(m.beta[0] > 0.0);
    }

    #[test]
    fn independent_covariate_small_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let t: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let m = fit_cox(&x, &t, &e, 1e-4).unwrap();
        assert!(m.beta[0].abs() < 0.1, "beta {}", m.beta[0]);
    }

    #[test]
    fn predict_risk_dims() {
        let m = CoxModel {
            beta: vec![1.0, 0.0],
            penalizer: 0.0,
            baseline: None,
            diagnostics: CoxDiagnostics {
                iterations: 0,
                grad_norm: 0.0,
                converged: true,
                penalizer_path: vec![0.0],
                dropped_columns: vec![],
                objective_trace: vec![],
            },
        };
        assert_eq!(m.predict_risk(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.predict_risk(&[2.0, 5.0]).unwrap(), 2.0);
        assert!(m.predict_risk(&[1.0]).is_err());
    }

    #[test]
    fn breslow_hand_example() {
        // eta = ln 2 * x; x = [1, 0, 1, 0, 0]; times 1 2 2 3 4; events y n y y n.
        let mut m = fit_cox(&[vec![0.0], vec![1.0]], &[1.0, 2.0], &[true, true], 0.0).unwrap();
        m.beta = vec![2f64.ln()];
        let x = vec![vec![1.0], vec![0.0], vec![1.0], vec![0.0], vec![0.0]];
        let t = [1.0, 2.0, 2.0, 3.0, 4.0];
        let e = [true, false, true, true, false];
        let b = estimate_baseline_hazard(&m, &x, &t, &e).unwrap();
        let bh = b.baseline.as_ref().unwrap();
        // Offset-free hazards: 1/(2+1+2+1+1), 1/(1+2+1+1), 1/(1+1).
        let h1 = 1.0 / 7.0;
        let h2 = h1 + 1.0 / 5.0;
        let h3 = h2 + 1.0 / 2.0;
        let c = (-bh.offset).exp();
        assert_eq!(bh.times, vec![1.0, 2.0, 3.0]);
        for (got, want) in bh.cum_hazard.iter().zip([h1, h2, h3]) {
            assert!((got * c - want).abs() < 1e-12);
        }
        let s = b.survival(&[1.0], 2.5).unwrap();
        assert!((s - (-h2 * 2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn breslow_without_events_is_flat() {
        let (x, t, e) = toy();
        let m = fit_cox(&x, &t, &e, 0.0).unwrap();
        let b = estimate_baseline_hazard(&m, &x, &t, &vec![false; t.len()]).unwrap();
        assert!(b.baseline.as_ref().unwrap().times.is_empty());
        assert_eq!(b.survival(&x[0], 100.0).unwrap(), 1.0);
    }
}

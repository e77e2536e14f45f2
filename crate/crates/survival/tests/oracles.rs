//! Metric and model outputs checked against independent brute-force computations.

use chronoscope_survival::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

/// Censoring survival by direct product over censoring times; `strict` gives the left limit.
fn g_oracle(t: &[f64], e: &[bool], at: f64, strict: bool) -> f64 {
    let mut times: Vec<f64> = (0..t.len()).filter(|&i| !e[i]).map(|i| t[i]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut g = 1.0;
    for s in times {
        if (strict && s >= at) || (!strict && s > at) {
            break;
        }
        let at_risk = t.iter().filter(|&&x| x >= s).count() as f64;
        let c = (0..t.len()).filter(|&i| !e[i] && t[i] == s).count() as f64;
        g *= 1.0 - c / at_risk;
    }
    g
}

fn half(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

fn auc_oracle(r: &[f64], t: &[f64], e: &[bool], tau: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        if !(e[i] && t[i] <= tau) {
            continue;
        }
        let wi = 1.0 / g_oracle(t, e, t[i], true);
        for j in 0..r.len() {
            if t[j] > tau {
                let w = wi / g_oracle(t, e, tau, false);
                num += w * half(r[i], r[j]);
                den += w;
            }
        }
    }
    num / den
}

fn uno_oracle(r: &[f64], t: &[f64], e: &[bool], tau: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if e[i] && t[i] < t[j] && t[i] < tau {
                let w = g_oracle(t, e, t[i], true).powi(-2);
                num += w * half(r[i], r[j]);
                den += w;
            }
        }
    }
    num / den
}

/// Eight instances, one censored before tau = 5 and one tied risk.
fn fixture8() -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let t = vec![1.0, 2.0, 3.0, 4.5, 6.0, 7.0, 8.0, 9.0];
    let e = vec![true, false, true, true, false, true, false, true];
    let r = vec![0.9, 0.1, 0.4, 0.6, 0.3, 0.6, 0.2, 0.5];
    (r, t, e)
}

#[test]
fn auc_matches_weighted_pair_enumeration() {
    let (r, t, e) = fixture8();
    let g = censoring_curve(&t, &e).unwrap();
    let got = cumulative_dynamic_auc(&r, &t, &e, 5.0, &g).unwrap();
    assert!((got.auc - auc_oracle(&r, &t, &e, 5.0)).abs() < 1e-10);
    assert_eq!(got.n_excluded, 0);
}

#[test]
fn uno_matches_pair_enumeration() {
    let (r, t, e) = fixture8();
    let g = censoring_curve(&t, &e).unwrap();
    for tau in [3.5, 5.0, 8.5] {
        let got = uno_c_index(&r, &t, &e, tau, &g).unwrap();
        assert!((got - uno_oracle(&r, &t, &e, tau)).abs() < 1e-10);
    }
}

#[test]
fn uno_without_censoring_is_harrell() {
    let t: Vec<f64> = (1..=9).map(f64::from).collect();
    let e = vec![true; 9];
    let r = vec![5.0, 9.0, 1.0, 3.0, 3.0, 2.0, 8.0, 0.0, 4.0];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..9 {
        for j in i + 1..9 {
            num += half(r[i], r[j]);
            den += 1.0;
        }
    }
    let g = censoring_curve(&t, &e).unwrap();
    assert!((uno_c_index(&r, &t, &e, 100.0, &g).unwrap() - num / den).abs() < 1e-12);
}

#[test]
fn brier_hand_computed() {
    // Censoring KM: 0.8 after t = 2, 0.4 after t = 5.
    // Terms: 1(0.1)^2 + 0 + 1.25(0.3)^2 + 1.25(0.6)^2 + 1.25(0.3)^2 + 1.25(0.1)^2 = 0.6975.
    let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let e = [true, false, true, true, false, false];
    let p = [0.9, 0.2, 0.7, 0.4, 0.3, 0.1];
    let g = censoring_curve(&t, &e).unwrap();
    let got = ipcw_brier(&p, &t, &e, 4.5, &g).unwrap();
    assert!((got - 0.6975 / 6.0).abs() < 1e-12);
}

#[test]
fn brier_perfect_probabilities_are_minimal() {
    let (_, t, e) = fixture8();
    let tau = 5.0;
    let g = censoring_curve(&t, &e).unwrap();
    let y: Vec<f64> = (0..8).map(|i| f64::from(u8::from(e[i] && t[i] <= tau))).collect();
    let base = ipcw_brier(&y, &t, &e, tau, &g).unwrap();
    for i in 0..8 {
        if label_at(t[i], e[i], tau).is_none() {
            continue;
        }
        let mut q = y.clone();
        q[i] = if y[i] == 1.0 { 0.95 } else { 0.05 };
        assert!(ipcw_brier(&q, &t, &e, tau, &g).unwrap() > base);
    }
}

#[test]
fn auc_without_censoring_is_plain_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(4..=50);
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..30u32))).collect();
        let r: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u32))).collect();
        let e = vec![true; n];
        let tau = 15.0;
        let cases: Vec<usize> = (0..n).filter(|&i| t[i] <= tau).collect();
        let ctrls: Vec<usize> = (0..n).filter(|&i| t[i] > tau).collect();
        if cases.is_empty() || ctrls.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for &i in &cases {
            for &j in &ctrls {
                s += half(r[i], r[j]);
            }
        }
        let plain = s / (cases.len() * ctrls.len()) as f64;
        let g = censoring_curve(&t, &e).unwrap();
        assert_eq!(cumulative_dynamic_auc(&r, &t, &e, tau, &g).unwrap().auc, plain);
    }
}

#[test]
fn auc_invariant_to_monotone_transform_and_order() {
    let (r, t, e) = fixture8();
    let g = censoring_curve(&t, &e).unwrap();
    let a = cumulative_dynamic_auc(&r, &t, &e, 5.0, &g).unwrap().auc;
    let rx: Vec<f64> = r.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
    assert_eq!(cumulative_dynamic_auc(&rx, &t, &e, 5.0, &g).unwrap().auc, a);
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let pr: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
    let pt: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
    let pe: Vec<bool> = perm.iter().map(|&i| e[i]).collect();
    let pg = censoring_curve(&pt, &pe).unwrap();
    assert!((cumulative_dynamic_auc(&pr, &pt, &pe, 5.0, &pg).unwrap().auc - a).abs() < 1e-15);
    assert!((uno_c_index(&pr, &pt, &pe, 5.0, &pg).unwrap() - uno_c_index(&r, &t, &e, 5.0, &g).unwrap()).abs() < 1e-15);
}

/// Ten bins of ten uncensored instances; bin b has b events before tau.
fn calibrated_fixture() -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut p = Vec::new();
    let mut t = Vec::new();
    for b in 0..10 {
        for k in 0..10 {
            p.push(b as f64 / 10.0);
            t.push(if k < b { 1.0 } else { 5.0 });
        }
    }
    let n = p.len();
    (p, t, vec![true; n])
}

#[test]
fn calibration_zero_when_perfect() {
    let (p, t, e) = calibrated_fixture();
    let c = calibration_indices(&p, &t, &e, 2.0, 10).unwrap();
    assert!(c.ici.abs() < 1e-10 && c.mce.abs() < 1e-10);
}

#[test]
fn calibration_offset() {
    let (p, t, e) = calibrated_fixture();
    let q: Vec<f64> = p.iter().map(|v| v + 0.1).collect();
    let c = calibration_indices(&q, &t, &e, 2.0, 10).unwrap();
    assert!((c.ici - 0.1).abs() < 1e-10);
    assert!((c.mce - 0.1).abs() < 1e-10);
    assert!(c.mce >= c.ici);
}

fn efron_oracle(x: &[f64], t: &[f64], e: &[bool], beta: f64) -> f64 {
    let mut times: Vec<f64> = (0..t.len()).filter(|&i| e[i]).map(|i| t[i]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut ll = 0.0;
    for s in times {
        let dead: Vec<usize> = (0..t.len()).filter(|&i| e[i] && t[i] == s).collect();
        let risk: f64 = (0..t.len()).filter(|&j| t[j] >= s).map(|j| (beta * x[j]).exp()).sum();
        let tie: f64 = dead.iter().map(|&i| (beta * x[i]).exp()).sum();
        let d = dead.len() as f64;
        for &i in &dead {
            ll += beta * x[i];
        }
        for l in 0..dead.len() {
            ll -= (risk - l as f64 / d * tie).ln();
        }
    }
    ll
}

fn grid_argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|k| lo + k as f64 * step)
        .fold((f64::NEG_INFINITY, lo), |best, b| {
            let v = f(b);
            if v > best.0 {
                (v, b)
            } else {
                best
            }
        })
        .1
}

#[test]
fn cox_matches_grid_search() {
    let x = [1., 0., 1., 1., 0., 0., 1., 0., 1., 0., 1., 1., 0., 0., 1., 0., 1., 0., 0., 1.];
    let t = [2., 5., 3., 3., 8., 9., 1., 7., 4., 6., 2., 5., 10., 4., 3., 11., 6., 12., 8., 7.];
    let e = [
        true, true, true, false, true, false, true, true, true, false, true, false, true, true, true, false, true,
        false, true, true,
    ];
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    for lambda in [1e-4, 0.1] {
        let obj = |b: f64| efron_oracle(&x, &t, &e, b) / n - 0.5 * lambda * (b * sd).powi(2);
        let coarse = grid_argmax(obj, -5.0, 5.0, 1e-3);
        let fine = grid_argmax(obj, coarse - 1e-3, coarse + 1e-3, 1e-6);
        let m = fit_cox(&rows, &t, &e, lambda).unwrap();
        assert!((m.beta[0] - fine).abs() < 1e-3, "lambda {lambda}: {} vs {fine}", m.beta[0]);
        assert_eq!(m.penalizer, lambda);
    }
}

#[test]
fn breslow_at_zero_beta_is_nelson_aalen() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..60u32))).collect();
    let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut m = fit_cox(&x, &t, &e, 1e-4).unwrap();
    m.beta = vec![0.0, 0.0];
    let b = estimate_baseline_hazard(&m, &x, &t, &e).unwrap();
    let (na_t, na_h) = nelson_aalen(&t, &e).unwrap();
    let bh = b.baseline.unwrap();
    assert_eq!(bh.times, na_t);
    for (a, b) in bh.cum_hazard.iter().zip(&na_h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn balanced_accuracy_label_independent_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 2000;
    let draw = |rng: &mut ChaCha8Rng| {
        let t: Vec<f64> = (0..n).map(|_| Exp::new(0.5).unwrap().sample(rng)).collect();
        let e = vec![true; n];
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        (r, t, e)
    };
    let (rv, tv, ev) = draw(&mut rng);
    let (rt, tt, et) = draw(&mut rng);
    let ba = balanced_accuracy(&rv, &tv, &ev, &rt, &tt, &et, 1.4).unwrap();
    assert!((ba.test - 0.5).abs() < 0.05, "{}", ba.test);
}

#[test]
fn bernoulli_mean_ci_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..1000).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let s = bootstrap_ci(1000, 2000, 3, |idx| Ok(idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64)).unwrap();
    let p = x.iter().sum::<f64>() / 1000.0;
    let want = 2.0 * 1.96 * (p * (1.0 - p) / 1000.0).sqrt();
    let got = s.ci_high - s.ci_low;
    assert!((got / want - 1.0).abs() < 0.1, "{got} vs {want}");
}

#[test]
fn planted_signal_is_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 600;
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let t: Vec<f64> = x.iter().map(|&v| Exp::new((2.0 * v).exp()).unwrap().sample(&mut rng)).collect();
    let c: Vec<f64> = (0..n).map(|_| Exp::new(0.3).unwrap().sample(&mut rng)).collect();
    let dur: Vec<f64> = t.iter().zip(&c).map(|(a, b)| a.min(*b)).collect();
    let ev: Vec<bool> = t.iter().zip(&c).map(|(a, b)| a <= b).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let tau = 1.0;
    let a = |idx: &[usize]| evaluate_metric(Metric::Auc, &x, &dur, &ev, tau, idx);
    let b = |idx: &[usize]| evaluate_metric(Metric::Auc, &noise, &dur, &ev, tau, idx);
    let r = bootstrap_significance(n, 100, 0, a, b).unwrap();
    assert!(r.p_value < 0.01, "{r:?}");
    assert!(r.observed_diff > 0.2);
}

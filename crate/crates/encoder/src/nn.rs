//! Dense layers with explicit backward passes. Every `*_backward` accumulates
//! parameter gradients into the supplied buffers and returns the input gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The inner `tanh` of the GELU approximation, via a single `exp`.
pub fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// Derivative of GELU at `x`, given `t = gelu_tanh(x)`.
pub fn gelu_grad_t(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_t(x, gelu_tanh(x))
}

/// GELU activations and their inner `tanh` values (kept for the reverse pass).
pub fn gelu_forward(pre: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let t = pre.mapv(gelu_tanh);
    let mut act = pre.clone();
    Zip::from(&mut act).and(&t).for_each(|a, &tv| *a = 0.5 * *a * (1.0 + tv));
    (act, t)
}

/// Multiplies `d` in place by the GELU derivative.
pub fn gelu_backward(d: &mut Array2<f64>, pre: &Array2<f64>, t: &Array2<f64>) {
    Zip::from(d).and(pre).and(t).for_each(|d, &x, &tv| *d *= gelu_grad_t(x, tv));
}

/// `x W + b` with `b` stored as a 1×n row.
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

pub fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    let mut db_row = db.row_mut(0);
    db_row += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.dot(&row) / n;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let mut y = &xhat * &g.row(0);
    y += &b.row(0);
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    g: &Array2<f64>,
    dy: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    {
        let mut dg_row = dg.row_mut(0);
        dg_row += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut db_row = db.row_mut(0);
        db_row += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &g.row(0);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / n;
        let m2 = dh.dot(&xh) / n;
        let s = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|d, &a, &h| *d = s * (a - m1 - h * m2));
    }
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Two-layer perceptron `gelu(x W1 + b1) W2 + b2`.
pub struct MlpCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub tanh: Array2<f64>,
    pub act: Array2<f64>,
}

pub struct MlpParams<'a> {
    pub w1: &'a Array2<f64>,
    pub b1: &'a Array2<f64>,
    pub w2: &'a Array2<f64>,
    pub b2: &'a Array2<f64>,
}

pub fn mlp(p: &MlpParams, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
    let pre = linear(x.view(), p.w1, p.b1);
    let (act, tanh) = gelu_forward(&pre);
    let y = linear(act.view(), p.w2, p.b2);
    (y, MlpCache { x, pre, tanh, act })
}

pub struct MlpGrads<'a> {
    pub w1: &'a mut Array2<f64>,
    pub b1: &'a mut Array2<f64>,
    pub w2: &'a mut Array2<f64>,
    pub b2: &'a mut Array2<f64>,
}

pub fn mlp_backward(p: &MlpParams, c: &MlpCache, dy: &Array2<f64>, g: MlpGrads) -> Array2<f64> {
    let dact = linear_backward(c.act.view(), p.w2, dy, g.w2, g.b2);
    let mut dpre = dact;
    gelu_backward(&mut dpre, &c.pre, &c.tanh);
    linear_backward(c.x.view(), p.w1, &dpre, g.w1, g.b1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-30.0, -3.0, -0.7, 0.0, 0.4, 2.5, 40.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
            let exact = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((gelu(x) - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 0.0, 2.0]];
        let g = Array2::ones((1, 4));
        let b = Array2::zeros((1, 4));
        let (y, _) = layer_norm(&x, &g, &b);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.dot(&row) / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut s = array![[1000.0, 1000.0], [0.0, 3.0]];
        softmax_rows(&mut s);
        assert_eq!(s[[0, 0]], 0.5);
        assert!((s.row(1).sum() - 1.0).abs() < 1e-15);
    }
}

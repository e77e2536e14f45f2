//! Sequence embedding and the bidirectional pre-norm transformer, with a
//! reverse pass that mirrors the forward pass step by step.

use chronoscope_core::domain::MINUTES_PER_CENTURY;
use chronoscope_core::TokenId;
use ndarray::{s, Array2, Axis, Zip};

use crate::config::{N_DENSE_SLOTS, N_STRUCT_SLOTS};
use crate::error::{EncoderError, Result};
use crate::nn::{
    gelu_backward, gelu_forward, layer_norm, layer_norm_backward, linear, linear_backward, mlp, mlp_backward,
    softmax_rows, LnCache, MlpCache, MlpGrads, MlpParams,
};
use crate::params::{EncoderParams, Grads, MlpIdx};

/// `[CLS, sex, ethnicity, age]` precede the events.
pub const PREFIX_LEN: usize = 4;

/// Event time as a fraction of a century.
pub fn time_fraction(time_min: i64) -> f64 {
    time_min as f64 / MINUTES_PER_CENTURY
}

#[derive(Clone, Debug, PartialEq)]
pub enum Content {
    Token(TokenId),
    Dense { slot: usize, x: Vec<f64> },
    MaskStruct(usize),
    MaskDense(usize),
    /// Content embedding supplied directly, bypassing the tables.
    Raw(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub content: Content,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput {
    pub sex: usize,
    pub ethnicity: Vec<f64>,
    /// Age in centuries.
    pub age: f64,
    pub items: Vec<Item>,
}

impl SeqInput {
    pub fn len(&self) -> usize {
        PREFIX_LEN + self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    pre: Array2<f64>,
    tanh: Array2<f64>,
    act: Array2<f64>,
}

pub struct Tape {
    eth: MlpCache,
    age: MlpCache,
    time: MlpCache,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    /// Final hidden states, one row per position.
    pub hidden: Array2<f64>,
}

fn mlp_params(p: &EncoderParams, i: MlpIdx) -> MlpParams<'_> {
    MlpParams {
        w1: p.t(i.w1),
        b1: p.t(i.b1),
        w2: p.t(i.w2),
        b2: p.t(i.b2),
    }
}

fn mlp_grads(g: &mut Grads, i: MlpIdx) -> MlpGrads<'_> {
    let [w1, b1, w2, b2] = g
        .tensors
        .get_disjoint_mut([i.w1, i.b1, i.w2, i.b2])
        .expect("distinct tensors");
    MlpGrads { w1, b1, w2, b2 }
}

fn pair(g: &mut Grads, a: usize, b: usize) -> (&mut Array2<f64>, &mut Array2<f64>) {
    let [x, y] = g.tensors.get_disjoint_mut([a, b]).expect("distinct tensors");
    (x, y)
}

fn check_input(p: &EncoderParams, input: &SeqInput) -> Result<()> {
    let cfg = &p.config;
    if input.ethnicity.len() != cfg.ethnicity_dim {
        return Err(EncoderError::DenseDim {
            found: input.ethnicity.len(),
            expected: cfg.ethnicity_dim,
        });
    }
    if input.sex > 2 {
        return Err(EncoderError::Config(format!("sex index {}", input.sex)));
    }
    for it in &input.items {
        match &it.content {
            Content::Token(t) if *t as usize >= p.vocab_size => return Err(EncoderError::UnknownToken(*t)),
            Content::Dense { slot, x } => {
                let expected = cfg.dense_dim(*slot);
                if x.len() != expected {
                    return Err(EncoderError::DenseDim { found: x.len(), expected });
                }
            }
            Content::MaskStruct(s) if *s >= N_STRUCT_SLOTS => {
                return Err(EncoderError::Config(format!("mask slot {s}")))
            }
            Content::MaskDense(s) if *s >= N_DENSE_SLOTS => return Err(EncoderError::Config(format!("mask slot {s}"))),
            Content::Raw(v) if v.len() != cfg.embed_dim => {
                return Err(EncoderError::DenseDim {
                    found: v.len(),
                    expected: cfg.embed_dim,
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Content part of an item's input embedding (without the time encoding).
pub fn content_embedding(p: &EncoderParams, c: &Content) -> Vec<f64> {
    let l = &p.layout;
    match c {
        Content::Token(t) => p.t(l.w_emb).row(*t as usize).to_vec(),
        Content::Dense { slot, x } => {
            let xv = ndarray::ArrayView2::from_shape((1, x.len()), x).expect("row");
            linear(xv, p.t(l.proj_w[*slot]), p.t(l.proj_b[*slot])).row(0).to_vec()
        }
        Content::MaskStruct(s) => p.t(l.mask_struct).row(*s).to_vec(),
        Content::MaskDense(s) => p.t(l.mask_dense).row(*s).to_vec(),
        Content::Raw(v) => v.clone(),
    }
}

/// Input embeddings plus the caches needed to differentiate them.
fn embed(p: &EncoderParams, input: &SeqInput) -> (Array2<f64>, MlpCache, MlpCache, MlpCache) {
    let l = &p.layout;
    let e = p.config.embed_dim;
    let n = input.len();
    let mut x = Array2::zeros((n, e));
    x.row_mut(0).assign(&p.t(l.cls).row(0));
    x.row_mut(1).assign(&p.t(l.w_sex).row(input.sex));
    let eth_in = Array2::from_shape_vec((1, input.ethnicity.len()), input.ethnicity.clone()).expect("row");
    let (eth, eth_c) = mlp(&mlp_params(p, l.eth), eth_in);
    x.row_mut(2).assign(&eth.row(0));
    let (age, age_c) = mlp(&mlp_params(p, l.age), Array2::from_elem((1, 1), input.age));
    x.row_mut(3).assign(&age.row(0));
    let taus = Array2::from_shape_fn((input.items.len(), 1), |(i, _)| input.items[i].tau);
    let (time, time_c) = mlp(&mlp_params(p, l.time), taus);
    for (i, it) in input.items.iter().enumerate() {
        let mut row = x.row_mut(PREFIX_LEN + i);
        row.assign(&time.row(i));
        match &it.content {
            Content::Token(t) => row += &p.t(l.w_emb).row(*t as usize),
            Content::MaskStruct(s) => row += &p.t(l.mask_struct).row(*s),
            Content::MaskDense(s) => row += &p.t(l.mask_dense).row(*s),
            c => {
                let v = content_embedding(p, c);
                Zip::from(&mut row).and(&v[..]).for_each(|a, &b| *a += b);
            }
        }
    }
    (x, eth_c, age_c, time_c)
}

/// Input embeddings `z_t` for every position.
pub fn embed_sequence(p: &EncoderParams, input: &SeqInput) -> Result<Array2<f64>> {
    check_input(p, input)?;
    Ok(embed(p, input).0)
}

fn block_forward(p: &EncoderParams, bi: usize, x: &mut Array2<f64>) -> BlockCache {
    let b = &p.layout.blocks[bi];
    let cfg = &p.config;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, p.t(b.ln1_g), p.t(b.ln1_b));
    let q = linear(a.view(), p.t(b.wq), p.t(b.bq));
    let k = linear(a.view(), p.t(b.wk), p.t(b.bk));
    let v = linear(a.view(), p.t(b.wv), p.t(b.bv));
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(nh);
    for h in 0..nh {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        softmax_rows(&mut sc);
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    *x += &linear(ctx.view(), p.t(b.wo), p.t(b.bo));
    let (bn, ln2) = layer_norm(x, p.t(b.ln2_g), p.t(b.ln2_b));
    let pre = linear(bn.view(), p.t(b.w1), p.t(b.b1));
    let (act, tanh) = gelu_forward(&pre);
    *x += &linear(act.view(), p.t(b.w2), p.t(b.b2));
    BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b: bn,
        pre,
        tanh,
        act,
    }
}

fn block_backward(p: &EncoderParams, bi: usize, c: &BlockCache, dx: Array2<f64>, g: &mut Grads) -> Array2<f64> {
    let b = &p.layout.blocks[bi];
    let cfg = &p.config;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward branch.
    let (gw, gb) = pair(g, b.w2, b.b2);
    let mut dpre = linear_backward(c.act.view(), p.t(b.w2), &dx, gw, gb);
    gelu_backward(&mut dpre, &c.pre, &c.tanh);
    let (gw, gb) = pair(g, b.w1, b.b1);
    let dbn = linear_backward(c.b.view(), p.t(b.w1), &dpre, gw, gb);
    let (gg, gbeta) = pair(g, b.ln2_g, b.ln2_b);
    let mut dx1 = dx;
    dx1 += &layer_norm_backward(&c.ln2, p.t(b.ln2_g), &dbn, gg, gbeta);

    // Attention branch.
    let (gw, gb) = pair(g, b.wo, b.bo);
    let dctx = linear_backward(c.ctx.view(), p.t(b.wo), &dx1, gw, gb);
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..nh {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pr = &c.probs[h];
        let dc = dctx.slice(cols);
        let dp = dc.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&dc));
        let row_dot = (&dp * pr).sum_axis(Axis(1));
        let mut ds = dp;
        Zip::from(ds.rows_mut())
            .and(pr.rows())
            .and(&row_dot)
            .for_each(|mut d, pp, &r| {
                Zip::from(&mut d).and(pp).for_each(|x, &pv| *x = pv * (*x - r) * scale);
            });
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let (gw, gb) = pair(g, b.wq, b.bq);
    let mut da = linear_backward(c.a.view(), p.t(b.wq), &dq, gw, gb);
    let (gw, gb) = pair(g, b.wk, b.bk);
    da += &linear_backward(c.a.view(), p.t(b.wk), &dk, gw, gb);
    let (gw, gb) = pair(g, b.wv, b.bv);
    da += &linear_backward(c.a.view(), p.t(b.wv), &dv, gw, gb);
    let (gg, gbeta) = pair(g, b.ln1_g, b.ln1_b);
    dx1 += &layer_norm_backward(&c.ln1, p.t(b.ln1_g), &da, gg, gbeta);
    dx1
}

pub fn forward(p: &EncoderParams, input: &SeqInput) -> Result<Tape> {
    check_input(p, input)?;
    let (mut x, eth, age, time) = embed(p, input);
    let blocks = (0..p.config.n_layers).map(|bi| block_forward(p, bi, &mut x)).collect();
    let (hidden, lnf) = layer_norm(&x, p.t(p.layout.lnf_g), p.t(p.layout.lnf_b));
    Ok(Tape {
        eth,
        age,
        time,
        blocks,
        lnf,
        hidden,
    })
}

/// Accumulates parameter gradients for `d_hidden` and returns the gradient
/// with respect to the input embeddings.
pub fn backward(p: &EncoderParams, input: &SeqInput, tape: &Tape, d_hidden: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
    let l = &p.layout;
    let (gg, gb) = pair(g, l.lnf_g, l.lnf_b);
    let mut dx = layer_norm_backward(&tape.lnf, p.t(l.lnf_g), d_hidden, gg, gb);
    for bi in (0..p.config.n_layers).rev() {
        dx = block_backward(p, bi, &tape.blocks[bi], dx, g);
    }
    {
        let mut r = g.tensors[l.cls].row_mut(0);
        r += &dx.row(0);
    }
    {
        let mut r = g.tensors[l.w_sex].row_mut(input.sex);
        r += &dx.row(1);
    }
    let d_eth = dx.slice(s![2..3, ..]).to_owned();
    mlp_backward(&mlp_params(p, l.eth), &tape.eth, &d_eth, mlp_grads(g, l.eth));
    let d_age = dx.slice(s![3..4, ..]).to_owned();
    mlp_backward(&mlp_params(p, l.age), &tape.age, &d_age, mlp_grads(g, l.age));
    let d_items = dx.slice(s![PREFIX_LEN.., ..]).to_owned();
    mlp_backward(&mlp_params(p, l.time), &tape.time, &d_items, mlp_grads(g, l.time));
    for (i, it) in input.items.iter().enumerate() {
        let d = d_items.row(i);
        match &it.content {
            Content::Token(t) => {
                let mut r = g.tensors[l.w_emb].row_mut(*t as usize);
                r += &d;
            }
            Content::Dense { slot, x } => {
                let xv = ndarray::ArrayView2::from_shape((x.len(), 1), x).expect("column");
                let dv = d.insert_axis(Axis(0));
                ndarray::linalg::general_mat_mul(1.0, &xv, &dv, 1.0, &mut g.tensors[l.proj_w[*slot]]);
                let mut r = g.tensors[l.proj_b[*slot]].row_mut(0);
                r += &d;
            }
            Content::MaskStruct(s) => {
                let mut r = g.tensors[l.mask_struct].row_mut(*s);
                r += &d;
            }
            Content::MaskDense(s) => {
                let mut r = g.tensors[l.mask_dense].row_mut(*s);
                r += &d;
            }
            Content::Raw(_) => {}
        }
    }
    dx
}

//! Flat parameter store. Every tensor is a matrix (biases and gains are 1×n
//! rows); named indices into the store live in [`Layout`].

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, N_DENSE_SLOTS, N_STRUCT_SLOTS};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrGroup {
    Base,
    Heads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: LrGroup,
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w_emb: usize,
    pub w_sex: usize,
    pub eth: MlpIdx,
    pub age: MlpIdx,
    pub time: MlpIdx,
    pub proj_w: [usize; N_DENSE_SLOTS],
    pub proj_b: [usize; N_DENSE_SLOTS],
    pub mask_struct: usize,
    pub mask_dense: usize,
    pub cls: usize,
    pub blocks: Vec<BlockIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: [usize; N_DENSE_SLOTS],
    pub head_b: [usize; N_DENSE_SLOTS],
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    meta: Vec<ParamMeta>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, group: LrGroup, decay: bool, init: Init) -> usize {
        self.meta.push(ParamMeta {
            name,
            rows,
            cols,
            group,
            decay,
        });
        self.inits.push(init);
        self.meta.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, group: LrGroup, std: f64) -> (usize, usize) {
        let w = self.add(format!("{name}.w"), fan_in, fan_out, group, true, Init::Normal(std));
        let b = self.add(format!("{name}.b"), 1, fan_out, group, false, Init::Zeros);
        (w, b)
    }

    fn mlp(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize, group: LrGroup) -> MlpIdx {
        let (w1, b1) = self.linear(&format!("{name}.0"), d_in, d_hidden, group, 1.0 / (d_in as f64).sqrt());
        let (w2, b2) = self.linear(&format!("{name}.1"), d_hidden, d_out, group, 0.02);
        MlpIdx { w1, b1, w2, b2 }
    }

    fn layer_norm(&mut self, name: &str, e: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.g"), 1, e, LrGroup::Base, false, Init::Ones);
        let b = self.add(format!("{name}.b"), 1, e, LrGroup::Base, false, Init::Zeros);
        (g, b)
    }
}

fn build_layout(cfg: &EncoderConfig, vocab_size: usize) -> (Layout, Vec<ParamMeta>, Vec<Init>) {
    use LrGroup::{Base, Heads};
    let e = cfg.embed_dim;
    let mut b = Builder {
        meta: Vec::new(),
        inits: Vec::new(),
    };
    let w_emb = b.add("w_emb".into(), vocab_size, e, Base, true, Init::Normal(0.02));
    let w_sex = b.add("w_sex".into(), 3, e, Base, true, Init::Normal(0.02));
    let eth = b.mlp("p_eth", cfg.ethnicity_dim, e, e, Heads);
    let age = b.mlp("p_age", 1, e, e, Heads);
    let time = b.mlp("phi_time", 1, e, e, Base);
    let mut proj_w = [0; N_DENSE_SLOTS];
    let mut proj_b = [0; N_DENSE_SLOTS];
    for s in 0..N_DENSE_SLOTS {
        let d = cfg.dense_dim(s);
        (proj_w[s], proj_b[s]) = b.linear(&format!("p_dense.{s}"), d, e, Heads, 1.0 / (d.max(1) as f64).sqrt());
    }
    let mask_struct = b.add("mask_struct".into(), N_STRUCT_SLOTS, e, Base, false, Init::Normal(0.02));
    let mask_dense = b.add("mask_dense".into(), N_DENSE_SLOTS, e, Base, false, Init::Normal(0.02));
    let cls = b.add("cls".into(), 1, e, Base, false, Init::Normal(0.02));
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let proj_std = 0.02 / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = format!("block.{l}");
        let (ln1_g, ln1_b) = b.layer_norm(&format!("{p}.ln1"), e);
        let (wq, bq) = b.linear(&format!("{p}.q"), e, e, Base, 0.02);
        let (wk, bk) = b.linear(&format!("{p}.k"), e, e, Base, 0.02);
        let (wv, bv) = b.linear(&format!("{p}.v"), e, e, Base, 0.02);
        let (wo, bo) = b.linear(&format!("{p}.o"), e, e, Base, proj_std);
        let (ln2_g, ln2_b) = b.layer_norm(&format!("{p}.ln2"), e);
        let (w1, b1) = b.linear(&format!("{p}.ff0"), e, cfg.mlp_width, Base, 0.02);
        let (w2, b2) = b.linear(&format!("{p}.ff1"), cfg.mlp_width, e, Base, proj_std);
        blocks.push(BlockIdx {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let (lnf_g, lnf_b) = b.layer_norm("ln_f", e);
    let mut head_w = [0; N_DENSE_SLOTS];
    let mut head_b = [0; N_DENSE_SLOTS];
    for s in 0..N_DENSE_SLOTS {
        (head_w[s], head_b[s]) = b.linear(&format!("head_dense.{s}"), e, cfg.dense_dim(s), Heads, 0.02);
    }
    let layout = Layout {
        w_emb,
        w_sex,
        eth,
        age,
        time,
        proj_w,
        proj_b,
        mask_struct,
        mask_dense,
        cls,
        blocks,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    };
    (layout, b.meta, b.inits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub tensors: Vec<Array2<f64>>,
    pub meta: Vec<ParamMeta>,
    pub layout: Layout,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let (layout, meta, inits) = build_layout(cfg, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tensors = meta
            .iter()
            .zip(inits)
            .map(|(m, init)| match init {
                Init::Zeros => Array2::zeros((m.rows, m.cols)),
                Init::Ones => Array2::ones((m.rows, m.cols)),
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    Array2::from_shape_simple_fn((m.rows, m.cols), || d.sample(&mut rng))
                }
            })
            .collect();
        Ok(EncoderParams {
            config: cfg.clone(),
            vocab_size,
            tensors,
            meta,
            layout,
        })
    }

    /// Rebuilds the layout for `cfg` and adopts `tensors`, checking shapes.
    pub fn from_tensors(cfg: &EncoderConfig, vocab_size: usize, tensors: Vec<Array2<f64>>) -> Result<Self> {
        cfg.validate()?;
        let (layout, meta, _) = build_layout(cfg, vocab_size);
        if tensors.len() != meta.len()
            || tensors.iter().zip(&meta).any(|(t, m)| t.dim() != (m.rows, m.cols))
        {
            return Err(crate::error::EncoderError::Checkpoint("tensor shapes do not match config".into()));
        }
        Ok(EncoderParams {
            config: cfg.clone(),
            vocab_size,
            tensors,
            meta,
            layout,
        })
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn t(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }
}

/// Gradient buffers in the same layout as [`EncoderParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Array2<f64>>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            *t *= s;
        }
    }
}

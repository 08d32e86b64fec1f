//! Flat parameter vectors and the layout that unflattens them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, INIT_STD, MLP_RATIO};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Weight matrix, stored row-major as `rows × cols` and applied as `x · W`.
    Matrix,
    Bias,
    /// Layer-norm gain.
    Gain,
    /// Embedding table (gathered, not multiplied).
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl Layout {
    fn push(&mut self, name: String, rows: usize, cols: usize, kind: ParamKind) -> usize {
        let idx = self.entries.len();
        self.entries.push(ParamEntry { name, rows, cols, offset: self.total, kind });
        self.total += rows * cols;
        idx
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Indices of one transformer block's tensors in the layout.
#[derive(Clone, Debug)]
pub struct BlockIndex {
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

#[derive(Clone, Debug)]
pub struct ModelIndex {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockIndex>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
}

pub fn build_layout(cfg: &ModelConfig) -> (Layout, ModelIndex) {
    let c = cfg.embed_dim;
    let f = MLP_RATIO * c;
    let mut l = Layout { entries: Vec::new(), total: 0 };
    let wte = l.push("wte".into(), cfg.input_vocab(), c, ParamKind::Embedding);
    let wpe = l.push("wpe".into(), cfg.context_length, c, ParamKind::Embedding);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("h{i}.{s}");
        blocks.push(BlockIndex {
            ln1_g: l.push(p("ln1.g"), 1, c, ParamKind::Gain),
            ln1_b: l.push(p("ln1.b"), 1, c, ParamKind::Bias),
            wq: l.push(p("attn.wq"), c, c, ParamKind::Matrix),
            bq: l.push(p("attn.bq"), 1, c, ParamKind::Bias),
            wk: l.push(p("attn.wk"), c, c, ParamKind::Matrix),
            bk: l.push(p("attn.bk"), 1, c, ParamKind::Bias),
            wv: l.push(p("attn.wv"), c, c, ParamKind::Matrix),
            bv: l.push(p("attn.bv"), 1, c, ParamKind::Bias),
            wo: l.push(p("attn.wo"), c, c, ParamKind::Matrix),
            bo: l.push(p("attn.bo"), 1, c, ParamKind::Bias),
            ln2_g: l.push(p("ln2.g"), 1, c, ParamKind::Gain),
            ln2_b: l.push(p("ln2.b"), 1, c, ParamKind::Bias),
            w1: l.push(p("mlp.w1"), c, f, ParamKind::Matrix),
            b1: l.push(p("mlp.b1"), 1, f, ParamKind::Bias),
            w2: l.push(p("mlp.w2"), f, c, ParamKind::Matrix),
            b2: l.push(p("mlp.b2"), 1, c, ParamKind::Bias),
        });
    }
    let lnf_g = l.push("lnf.g".into(), 1, c, ParamKind::Gain);
    let lnf_b = l.push("lnf.b".into(), 1, c, ParamKind::Bias);
    let head = l.push("head.w".into(), c, cfg.vocab_size, ParamKind::Matrix);
    (l, ModelIndex { wte, wpe, blocks, lnf_g, lnf_b, head })
}

/// Flattened parameters together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    pub layout: Arc<Layout>,
}

/// Per-tensor view produced by [`ParamVector::unflatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(Error::DimensionMismatch { what: "parameter vector", expected: layout.total, got: values.len() });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &[T] {
        &self.values[self.layout.entries[idx].range()]
    }

    pub fn unflatten(&self) -> BTreeMap<String, Tensor<T>> {
        self.layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), Tensor { rows: e.rows, cols: e.cols, data: self.values[e.range()].to_vec() }))
            .collect()
    }

    pub fn flatten(layout: Arc<Layout>, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut values = vec![T::zero(); layout.total];
        for e in &layout.entries {
            let t = tensors.get(&e.name).ok_or_else(|| Error::Config(format!("missing tensor {}", e.name)))?;
            if t.rows != e.rows || t.cols != e.cols {
                return Err(Error::DimensionMismatch { what: "tensor shape", expected: e.len(), got: t.data.len() });
            }
            values[e.range()].copy_from_slice(&t.data);
        }
        Ok(ParamVector { values, layout })
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Seeded initialization: N(0, 0.02²) for embeddings and weights, with the
/// residual output projections scaled by 1/sqrt(2·layers); zero biases;
/// unit layer-norm gains.
pub fn init_values<T: Real>(cfg: &ModelConfig, layout: &Layout) -> Vec<T> {
    let mut values = vec![T::zero(); layout.total];
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    for (i, e) in layout.entries.iter().enumerate() {
        let slot = &mut values[e.range()];
        match e.kind {
            ParamKind::Bias => {}
            ParamKind::Gain => slot.iter_mut().for_each(|v| *v = T::one()),
            ParamKind::Matrix | ParamKind::Embedding => {
                let resid = e.name.ends_with("attn.wo") || e.name.ends_with("mlp.w2");
                let std = if resid { resid_std } else { INIT_STD };
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut r = rng::indexed_stream(cfg.seed, "init", i as u64);
                for v in slot.iter_mut() {
                    *v = T::from_f64_lossy(normal.sample(&mut r));
                }
            }
        }
    }
    values
}

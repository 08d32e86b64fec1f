//! Pre-norm GPT-style decoder: forward pass with cached activations and a
//! hand-written backward pass.
//!
//! A batch is a ragged stack of sequences; dense layers run once over all
//! stacked rows, attention runs per sequence and head.

use std::sync::Arc;

use super::config::{ModelConfig, LN_EPS, MLP_RATIO};
use super::params::{build_layout, init_values, Layout, ModelIndex, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Op, Real};

/// Ragged batch of input sequences; every sequence starts at position 0.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub tokens: Vec<u32>,
    /// `(first row, length)` of each sequence.
    pub seqs: Vec<(usize, usize)>,
}

impl Inputs {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut inputs = Inputs::default();
        for s in seqs {
            inputs.push(s.as_ref());
        }
        inputs
    }

    pub fn push(&mut self, seq: &[u32]) {
        self.seqs.push((self.tokens.len(), seq.len()));
        self.tokens.extend_from_slice(seq);
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

/// Which tensors need a parameter gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradMask(pub Vec<bool>);

impl GradMask {
    pub fn all(layout: &Layout) -> Self {
        GradMask(vec![true; layout.entries.len()])
    }

    pub fn only(layout: &Layout, indices: &[usize]) -> Self {
        let mut m = vec![false; layout.entries.len()];
        for &i in indices {
            m[i] = true;
        }
        GradMask(m)
    }

    pub fn needs(&self, idx: usize) -> bool {
        self.0[idx]
    }
}

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ao: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations retained by [`Transformer::forward`] for the backward pass.
pub struct Cache<T> {
    pub logits: Vec<T>,
    rows: usize,
    layers: Vec<LayerCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
    prob_offsets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: ModelConfig,
    pub layout: Arc<Layout>,
    pub index: ModelIndex,
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], c: usize, xhat: &mut [T], rstd: &mut [T], y: &mut [T]) {
    let eps = T::from_f64_lossy(LN_EPS);
    let cf = T::from_usize(c).unwrap();
    for r in 0..rstd.len() {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            xhat[r * c + j] = xh;
            y[r * c + j] = xh * g[j] + b[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    c: usize,
    dx: Option<&mut [T]>,
    dg: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let rows = rstd.len();
    if let Some(dg) = dg {
        for r in 0..rows {
            for j in 0..c {
                dg[j] += dy[r * c + j] * xhat[r * c + j];
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for j in 0..c {
                db[j] += dy[r * c + j];
            }
        }
    }
    if let Some(dx) = dx {
        let cf = T::from_usize(c).unwrap();
        for r in 0..rows {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..c {
                let d = dy[r * c + j] * g[j];
                mean_d += d;
                mean_dx += d * xhat[r * c + j];
            }
            mean_d /= cf;
            mean_dx /= cf;
            for j in 0..c {
                let d = dy[r * c + j] * g[j];
                dx[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
            }
        }
    }
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    let n = b.len();
    for row in y.chunks_exact_mut(n) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], db: &mut [T]) {
    let n = db.len();
    for row in dy.chunks_exact(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (k * (u + c * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (u + c * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + three * c * u * u)
}

fn slot<'a, T>(grads: &'a mut [T], layout: &Layout, idx: usize) -> &'a mut [T] {
    &mut grads[layout.entries[idx].range()]
}

impl Transformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, index) = build_layout(&cfg);
        Ok(Transformer { cfg, layout: Arc::new(layout), index })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Seeded initialization θ0.
    pub fn init_params<T: Real>(&self) -> ParamVector<T> {
        ParamVector { values: init_values(&self.cfg, &self.layout), layout: self.layout.clone() }
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<()> {
        for &(_, len) in &inputs.seqs {
            if len > self.cfg.context_length {
                return Err(Error::SequenceTooLong { len, context: self.cfg.context_length });
            }
        }
        if let Some(&t) = inputs.tokens.iter().find(|&&t| t as usize >= self.cfg.input_vocab()) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.cfg.input_vocab() });
        }
        Ok(())
    }

    /// Forward pass producing next-token logits (`rows × V`) and the cache
    /// needed by [`Transformer::backward`].
    pub fn forward<T: Real>(&self, params: &[T], inputs: &Inputs) -> Result<Cache<T>> {
        if params.len() != self.layout.total {
            return Err(Error::DimensionMismatch { what: "parameters", expected: self.layout.total, got: params.len() });
        }
        self.check_inputs(inputs)?;
        let cfg = &self.cfg;
        let (c, f, vo) = (cfg.embed_dim, MLP_RATIO * cfg.embed_dim, cfg.vocab_size);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let n = inputs.rows();
        let p = |idx: usize| &params[self.layout.entries[idx].range()];
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

        let mut prob_offsets = Vec::with_capacity(inputs.seqs.len() + 1);
        let mut acc = 0;
        for &(_, t) in &inputs.seqs {
            prob_offsets.push(acc);
            acc += nh * t * t;
        }
        prob_offsets.push(acc);

        let mut x = vec![T::zero(); n * c];
        let wte = p(self.index.wte);
        let wpe = p(self.index.wpe);
        for &(start, len) in &inputs.seqs {
            for pos in 0..len {
                let r = start + pos;
                let tok = inputs.tokens[r] as usize;
                for j in 0..c {
                    x[r * c + j] = wte[tok * c + j] + wpe[pos * c + j];
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for blk in &self.index.blocks {
            let mut lc = LayerCache {
                xhat1: vec![T::zero(); n * c],
                rstd1: vec![T::zero(); n],
                h1: vec![T::zero(); n * c],
                q: vec![T::zero(); n * c],
                k: vec![T::zero(); n * c],
                v: vec![T::zero(); n * c],
                probs: vec![T::zero(); acc],
                ao: vec![T::zero(); n * c],
                xhat2: vec![T::zero(); n * c],
                rstd2: vec![T::zero(); n],
                h2: vec![T::zero(); n * c],
                u: vec![T::zero(); n * f],
                g: vec![T::zero(); n * f],
            };
            layer_norm(&x, p(blk.ln1_g), p(blk.ln1_b), c, &mut lc.xhat1, &mut lc.rstd1, &mut lc.h1);
            for (w, b, out) in [(blk.wq, blk.bq, &mut lc.q), (blk.wk, blk.bk, &mut lc.k), (blk.wv, blk.bv, &mut lc.v)] {
                matmul(Op::N, Op::N, n, c, c, &lc.h1, p(w), out, false);
                add_bias(out, p(b));
            }
            for (si, &(start, t)) in inputs.seqs.iter().enumerate() {
                for h in 0..nh {
                    let off = start * c + h * hd;
                    let pbase = prob_offsets[si] + h * t * t;
                    let probs = &mut lc.probs[pbase..pbase + t * t];
                    T::gemm_raw(t, hd, t, scale, &lc.q[off..], c as isize, 1, &lc.k[off..], 1, c as isize, T::zero(), probs, t as isize, 1);
                    for i in 0..t {
                        let row = &mut probs[i * t..(i + 1) * t];
                        let mx = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for v in row[..=i].iter_mut() {
                            *v = (*v - mx).exp();
                            sum += *v;
                        }
                        for v in row[..=i].iter_mut() {
                            *v /= sum;
                        }
                        row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                    }
                    T::gemm_raw(t, t, hd, T::one(), probs, t as isize, 1, &lc.v[off..], c as isize, 1, T::zero(), &mut lc.ao[off..], c as isize, 1);
                }
            }
            let mut y = vec![T::zero(); n * c];
            matmul(Op::N, Op::N, n, c, c, &lc.ao, p(blk.wo), &mut y, false);
            add_bias(&mut y, p(blk.bo));
            x.iter_mut().zip(&y).for_each(|(a, &b)| *a += b);

            layer_norm(&x, p(blk.ln2_g), p(blk.ln2_b), c, &mut lc.xhat2, &mut lc.rstd2, &mut lc.h2);
            matmul(Op::N, Op::N, n, c, f, &lc.h2, p(blk.w1), &mut lc.u, false);
            add_bias(&mut lc.u, p(blk.b1));
            for (g, &u) in lc.g.iter_mut().zip(&lc.u) {
                *g = gelu(u);
            }
            matmul(Op::N, Op::N, n, f, c, &lc.g, p(blk.w2), &mut y, false);
            add_bias(&mut y, p(blk.b2));
            x.iter_mut().zip(&y).for_each(|(a, &b)| *a += b);
            layers.push(lc);
        }

        let mut xhatf = vec![T::zero(); n * c];
        let mut rstdf = vec![T::zero(); n];
        let mut hf = vec![T::zero(); n * c];
        layer_norm(&x, p(self.index.lnf_g), p(self.index.lnf_b), c, &mut xhatf, &mut rstdf, &mut hf);
        let mut logits = vec![T::zero(); n * vo];
        matmul(Op::N, Op::N, n, c, vo, &hf, p(self.index.head), &mut logits, false);
        Ok(Cache { logits, rows: n, layers, xhatf, rstdf, hf, prob_offsets })
    }

    /// Backpropagate `dlogits` (`rows × V`). Returns a full-length gradient
    /// vector; entries of tensors not selected by `mask` are left at zero.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        inputs: &Inputs,
        cache: &Cache<T>,
        dlogits: &[T],
        mask: &GradMask,
    ) -> Vec<T> {
        let cfg = &self.cfg;
        let layout = &*self.layout;
        let (c, f, vo) = (cfg.embed_dim, MLP_RATIO * cfg.embed_dim, cfg.vocab_size);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let n = cache.rows;
        let p = |idx: usize| &params[layout.entries[idx].range()];
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut grads = vec![T::zero(); layout.total];

        // Lowest layer whose input gradient is still needed by some parameter below it.
        let embeds = mask.needs(self.index.wte) || mask.needs(self.index.wpe);
        let block_needs: Vec<bool> = self
            .index
            .blocks
            .iter()
            .map(|b| {
                [b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2]
                    .iter()
                    .any(|&i| mask.needs(i))
            })
            .collect();
        let need_below = |layer: usize| embeds || block_needs[..layer].iter().any(|&b| b);

        let head = self.index.head;
        if mask.needs(head) {
            matmul(Op::T, Op::N, c, n, vo, &cache.hf, dlogits, slot(&mut grads, layout, head), true);
        }
        let mut dhf = vec![T::zero(); n * c];
        matmul(Op::N, Op::T, n, vo, c, dlogits, p(head), &mut dhf, false);
        let mut dx = vec![T::zero(); n * c];
        {
            let (gi, bi) = (self.index.lnf_g, self.index.lnf_b);
            let mut dg = mask.needs(gi).then(|| vec![T::zero(); c]);
            let mut db = mask.needs(bi).then(|| vec![T::zero(); c]);
            layer_norm_backward(&dhf, &cache.xhatf, &cache.rstdf, p(gi), c, Some(&mut dx), dg.as_deref_mut(), db.as_deref_mut());
            if let Some(dg) = dg {
                slot(&mut grads, layout, gi).copy_from_slice(&dg);
            }
            if let Some(db) = db {
                slot(&mut grads, layout, bi).copy_from_slice(&db);
            }
        }

        for (li, blk) in self.index.blocks.iter().enumerate().rev() {
            if !block_needs[li] && !need_below(li) {
                break;
            }
            let lc = &cache.layers[li];
            // MLP branch: x_out = x_mid + W2 gelu(W1 LN2(x_mid)); dx holds d x_out.
            if mask.needs(blk.w2) {
                matmul(Op::T, Op::N, f, n, c, &lc.g, &dx, slot(&mut grads, layout, blk.w2), true);
            }
            if mask.needs(blk.b2) {
                bias_grad(&dx, slot(&mut grads, layout, blk.b2));
            }
            let mut du = vec![T::zero(); n * f];
            matmul(Op::N, Op::T, n, c, f, &dx, p(blk.w2), &mut du, false);
            for (d, &u) in du.iter_mut().zip(&lc.u) {
                *d *= gelu_grad(u);
            }
            if mask.needs(blk.w1) {
                matmul(Op::T, Op::N, c, n, f, &lc.h2, &du, slot(&mut grads, layout, blk.w1), true);
            }
            if mask.needs(blk.b1) {
                bias_grad(&du, slot(&mut grads, layout, blk.b1));
            }
            let mut dh2 = vec![T::zero(); n * c];
            matmul(Op::N, Op::T, n, f, c, &du, p(blk.w1), &mut dh2, false);
            {
                let mut dg = mask.needs(blk.ln2_g).then(|| vec![T::zero(); c]);
                let mut db = mask.needs(blk.ln2_b).then(|| vec![T::zero(); c]);
                layer_norm_backward(&dh2, &lc.xhat2, &lc.rstd2, p(blk.ln2_g), c, Some(&mut dx), dg.as_deref_mut(), db.as_deref_mut());
                if let Some(dg) = dg {
                    slot(&mut grads, layout, blk.ln2_g).iter_mut().zip(&dg).for_each(|(a, &b)| *a += b);
                }
                if let Some(db) = db {
                    slot(&mut grads, layout, blk.ln2_b).iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
                }
            }

            // Attention branch: x_mid = x_in + Wo attn(LN1(x_in)); dx holds d x_mid.
            if mask.needs(blk.wo) {
                matmul(Op::T, Op::N, c, n, c, &lc.ao, &dx, slot(&mut grads, layout, blk.wo), true);
            }
            if mask.needs(blk.bo) {
                bias_grad(&dx, slot(&mut grads, layout, blk.bo));
            }
            let mut dao = vec![T::zero(); n * c];
            matmul(Op::N, Op::T, n, c, c, &dx, p(blk.wo), &mut dao, false);
            let mut dq = vec![T::zero(); n * c];
            let mut dk = vec![T::zero(); n * c];
            let mut dv = vec![T::zero(); n * c];
            for (si, &(start, t)) in inputs.seqs.iter().enumerate() {
                let mut da = vec![T::zero(); t * t];
                for h in 0..nh {
                    let off = start * c + h * hd;
                    let pbase = cache.prob_offsets[si] + h * t * t;
                    let probs = &lc.probs[pbase..pbase + t * t];
                    T::gemm_raw(t, hd, t, T::one(), &dao[off..], c as isize, 1, &lc.v[off..], 1, c as isize, T::zero(), &mut da, t as isize, 1);
                    T::gemm_raw(t, t, hd, T::one(), probs, 1, t as isize, &dao[off..], c as isize, 1, T::zero(), &mut dv[off..], c as isize, 1);
                    for i in 0..t {
                        let pr = &probs[i * t..(i + 1) * t];
                        let dr = &mut da[i * t..(i + 1) * t];
                        let dotp: T = pr[..=i].iter().zip(dr[..=i].iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dotp) * scale;
                        }
                        dr[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                    }
                    T::gemm_raw(t, t, hd, T::one(), &da, t as isize, 1, &lc.k[off..], c as isize, 1, T::zero(), &mut dq[off..], c as isize, 1);
                    T::gemm_raw(t, t, hd, T::one(), &da, 1, t as isize, &lc.q[off..], c as isize, 1, T::zero(), &mut dk[off..], c as isize, 1);
                }
            }
            let mut dh1 = vec![T::zero(); n * c];
            for (w, b, d) in [(blk.wq, blk.bq, &dq), (blk.wk, blk.bk, &dk), (blk.wv, blk.bv, &dv)] {
                if mask.needs(w) {
                    matmul(Op::T, Op::N, c, n, c, &lc.h1, d, slot(&mut grads, layout, w), true);
                }
                if mask.needs(b) {
                    bias_grad(d, slot(&mut grads, layout, b));
                }
                matmul(Op::N, Op::T, n, c, c, d, p(w), &mut dh1, true);
            }
            let propagate = need_below(li);
            let mut dg = mask.needs(blk.ln1_g).then(|| vec![T::zero(); c]);
            let mut db = mask.needs(blk.ln1_b).then(|| vec![T::zero(); c]);
            layer_norm_backward(
                &dh1,
                &lc.xhat1,
                &lc.rstd1,
                p(blk.ln1_g),
                c,
                if propagate { Some(&mut dx) } else { None },
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dg) = dg {
                slot(&mut grads, layout, blk.ln1_g).iter_mut().zip(&dg).for_each(|(a, &b)| *a += b);
            }
            if let Some(db) = db {
                slot(&mut grads, layout, blk.ln1_b).iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
            }
        }

        if embeds {
            for &(start, len) in &inputs.seqs {
                for pos in 0..len {
                    let r = start + pos;
                    let tok = inputs.tokens[r] as usize;
                    if mask.needs(self.index.wte) {
                        let g = slot(&mut grads, layout, self.index.wte);
                        for j in 0..c {
                            g[tok * c + j] += dx[r * c + j];
                        }
                    }
                    if mask.needs(self.index.wpe) {
                        let g = slot(&mut grads, layout, self.index.wpe);
                        for j in 0..c {
                            g[pos * c + j] += dx[r * c + j];
                        }
                    }
                }
            }
        }
        grads
    }
}

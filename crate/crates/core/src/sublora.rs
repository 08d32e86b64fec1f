//! `θ = θ0 + LoRA(P·w)`: a Kronecker-structured random projector from the
//! trainable coordinates into low-rank adapter space, and the adapter map
//! onto the attention query/value matrices and the output head.

use std::sync::Arc;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, orthonormalize_columns, Op, Real};
use crate::model::{GradMask, Layout, Reparam, Transformer};
use crate::rng;

/// Factors above this size that are prime are rejected; they would force a
/// `1 × d` split and a projector factor as large as the adapter space.
const MAX_PRIME: usize = 1000;

/// `P = Q1 ⊗ Q2` with orthonormal columns, restricted to the first `d_lora`
/// rows. Rebuilt from `(d_lora, d, seed)`; never stored.
#[derive(Clone, Debug)]
pub struct Projector {
    /// `big1 × d1`, row-major.
    q1: Vec<f64>,
    /// `big2 × d2`, row-major.
    q2: Vec<f64>,
    pub d1: usize,
    pub d2: usize,
    pub big1: usize,
    pub big2: usize,
    pub d: usize,
    pub d_lora: usize,
    pub seed: u64,
}

fn is_prime(n: usize) -> bool {
    n >= 2 && (2..).take_while(|p| p * p <= n).all(|p| !n.is_multiple_of(p))
}

/// `d = d1·d2` with `d1` the largest divisor not above `√d`.
pub fn factor_intrinsic(d: usize) -> Result<(usize, usize)> {
    if d > MAX_PRIME && is_prime(d) {
        return Err(Error::InfeasibleFactorization(d));
    }
    let d1 = (1..=d).take_while(|k| k * k <= d).filter(|k| d.is_multiple_of(*k)).last().unwrap_or(1);
    Ok((d1, d / d1))
}

/// Smallest padded grid `big1·big2 ≥ d_lora` with `big1 ≥ d1`, `big2 ≥ d2`.
/// Ties go to the smaller pair of factor matrices.
pub fn factor_padded(d_lora: usize, d1: usize, d2: usize) -> (usize, usize) {
    let mut best = (usize::MAX, usize::MAX, 0, 0);
    for big1 in d1..=d_lora.max(d1) {
        let big2 = d_lora.div_ceil(big1).max(d2);
        let key = (big1 * big2, big1 * d1 + big2 * d2);
        if key < (best.0, best.1) {
            best = (key.0, key.1, big1, big2);
        }
        if big2 == d2 {
            break;
        }
    }
    (best.2, best.3)
}

fn gaussian_orthonormal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    loop {
        let mut a: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        if orthonormalize_columns(&mut a, rows, cols) {
            return a;
        }
    }
}

pub fn build_projector(d_lora: usize, d: usize, seed: u64) -> Result<Projector> {
    if d == 0 {
        return Err(Error::Config("intrinsic dimension must be positive".into()));
    }
    if d > d_lora {
        return Err(Error::IntrinsicDimTooLarge { d, d_lora });
    }
    let (d1, d2) = factor_intrinsic(d)?;
    let (big1, big2) = factor_padded(d_lora, d1, d2);
    let q1 = gaussian_orthonormal(big1, d1, &mut rng::stream(seed, "projector.q1"));
    let q2 = gaussian_orthonormal(big2, d2, &mut rng::stream(seed, "projector.q2"));
    Ok(Projector { q1, q2, d1, d2, big1, big2, d, d_lora, seed })
}

impl Projector {
    pub fn padded_dim(&self) -> usize {
        self.big1 * self.big2
    }

    /// `(Q1 ⊗ Q2)·w` truncated to `d_lora`: with `w` read row-major as a
    /// `d1 × d2` matrix `X`, the padded result is `Q1·X·Q2ᵀ` read row-major.
    pub fn project<T: Real>(&self, w: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.d_lora];
        self.project_into(w, &mut out)?;
        Ok(out)
    }

    /// Adds `P·w` onto `out`.
    pub fn project_add<T: Real>(&self, w: &[T], out: &mut [T]) -> Result<()> {
        self.apply(w, out, true)
    }

    pub fn project_into<T: Real>(&self, w: &[T], out: &mut [T]) -> Result<()> {
        self.apply(w, out, false)
    }

    fn apply<T: Real>(&self, w: &[T], out: &mut [T], accumulate: bool) -> Result<()> {
        if w.len() != self.d {
            return Err(Error::DimensionMismatch { what: "w", expected: self.d, got: w.len() });
        }
        if out.len() != self.d_lora {
            return Err(Error::DimensionMismatch { what: "LoRA vector", expected: self.d_lora, got: out.len() });
        }
        let x: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
        let mut t = vec![0.0; self.big1 * self.d2];
        matmul(Op::N, Op::N, self.big1, self.d1, self.d2, &self.q1, &x, &mut t, false);
        let mut y = vec![0.0; self.big1 * self.big2];
        matmul(Op::N, Op::T, self.big1, self.d2, self.big2, &t, &self.q2, &mut y, false);
        for (o, &v) in out.iter_mut().zip(&y) {
            if accumulate {
                *o += T::from_f64_lossy(v);
            } else {
                *o = T::from_f64_lossy(v);
            }
        }
        Ok(())
    }

    /// `Pᵀ·g` for `g` in adapter space (zero-padded to the full grid).
    pub fn transpose<T: Real>(&self, g: &[T]) -> Result<Vec<T>> {
        if g.len() != self.d_lora {
            return Err(Error::DimensionMismatch { what: "LoRA gradient", expected: self.d_lora, got: g.len() });
        }
        let mut gm = vec![0.0; self.big1 * self.big2];
        for (o, v) in gm.iter_mut().zip(g) {
            *o = v.as_f64();
        }
        let mut t = vec![0.0; self.d1 * self.big2];
        matmul(Op::T, Op::N, self.d1, self.big1, self.big2, &self.q1, &gm, &mut t, false);
        let mut x = vec![0.0; self.d1 * self.d2];
        matmul(Op::N, Op::N, self.d1, self.big2, self.d2, &t, &self.q2, &mut x, false);
        Ok(x.into_iter().map(T::from_f64_lossy).collect())
    }

    /// Column `j` of the padded `P`, length `big1·big2`.
    pub fn padded_column(&self, j: usize) -> Vec<f64> {
        let (a, b) = (j / self.d2, j % self.d2);
        let mut col = Vec::with_capacity(self.padded_dim());
        for i in 0..self.big1 {
            for k in 0..self.big2 {
                col.push(self.q1[i * self.d1 + a] * self.q2[k * self.d2 + b]);
            }
        }
        col
    }

    pub fn factors(&self) -> (&[f64], &[f64]) {
        (&self.q1, &self.q2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub name: String,
    /// Index of the target matrix in the model layout.
    pub param: usize,
    pub rows: usize,
    pub cols: usize,
    /// Offset of `U` (`rows × r`) in the adapter vector; `V` (`r × cols`)
    /// follows immediately.
    pub offset: usize,
}

impl LoraTarget {
    pub fn v_offset(&self, rank: usize) -> usize {
        self.offset + self.rows * rank
    }
}

/// Low-rank adapters on every query and value matrix and on the output head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayout {
    pub rank: usize,
    /// Multiplier on every product: `W = W0 + scale·U·V`.
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
    pub d_lora: usize,
}

impl LoraLayout {
    pub fn new(model: &Transformer, rank: usize, scale: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut indices = Vec::new();
        for b in &model.index.blocks {
            indices.push(b.wq);
            indices.push(b.wv);
        }
        indices.push(model.index.head);
        let mut targets = Vec::with_capacity(indices.len());
        let mut offset = 0;
        for param in indices {
            let e = &model.layout.entries[param];
            targets.push(LoraTarget { name: e.name.clone(), param, rows: e.rows, cols: e.cols, offset });
            offset += rank * (e.rows + e.cols);
        }
        Ok(LoraLayout { rank, scale, targets, d_lora: offset })
    }

    pub fn grad_mask(&self, layout: &Layout) -> GradMask {
        GradMask::only(layout, &self.targets.iter().map(|t| t.param).collect::<Vec<_>>())
    }

    fn check<T>(&self, layout: &Layout, theta: &[T], lora: &[T]) -> Result<()> {
        if theta.len() != layout.total {
            return Err(Error::DimensionMismatch { what: "θ0", expected: layout.total, got: theta.len() });
        }
        if lora.len() != self.d_lora {
            return Err(Error::DimensionMismatch { what: "LoRA vector", expected: self.d_lora, got: lora.len() });
        }
        for t in &self.targets {
            let e = layout.entries.get(t.param).ok_or_else(|| Error::Config(format!("no tensor for {}", t.name)))?;
            if e.rows != t.rows || e.cols != t.cols || e.name != t.name {
                return Err(Error::DimensionMismatch { what: "LoRA target", expected: t.rows * t.cols, got: e.len() });
            }
        }
        Ok(())
    }
}

/// `W_j = W0_j + scale·U_j·V_j` on every target; everything else copied
/// from `θ0`.
pub fn lora_expand<T: Real>(theta0: &[T], model_layout: &Layout, layout: &LoraLayout, lora: &[T]) -> Result<Vec<T>> {
    layout.check(model_layout, theta0, lora)?;
    let mut theta = theta0.to_vec();
    let r = layout.rank;
    let s = T::from_f64_lossy(layout.scale);
    for t in &layout.targets {
        let u = &lora[t.offset..t.offset + t.rows * r];
        let v = &lora[t.v_offset(r)..t.v_offset(r) + r * t.cols];
        let mut uv = vec![T::zero(); t.rows * t.cols];
        matmul(Op::N, Op::N, t.rows, r, t.cols, u, v, &mut uv, false);
        let w = &mut theta[model_layout.entries[t.param].range()];
        for (wi, d) in w.iter_mut().zip(&uv) {
            *wi += s * *d;
        }
    }
    Ok(theta)
}

/// Chain rule of [`lora_expand`]: `∂U = s·∂W·Vᵀ`, `∂V = s·Uᵀ·∂W`.
pub fn lora_pullback<T: Real>(model_layout: &Layout, layout: &LoraLayout, lora: &[T], grad_theta: &[T]) -> Vec<T> {
    let r = layout.rank;
    let s = T::from_f64_lossy(layout.scale);
    let mut g = vec![T::zero(); layout.d_lora];
    for t in &layout.targets {
        let dw = &grad_theta[model_layout.entries[t.param].range()];
        let u = &lora[t.offset..t.offset + t.rows * r];
        let v = &lora[t.v_offset(r)..t.v_offset(r) + r * t.cols];
        let (gu, gv) = g[t.offset..t.v_offset(r) + r * t.cols].split_at_mut(t.rows * r);
        matmul(Op::N, Op::T, t.rows, t.cols, r, dw, v, gu, false);
        matmul(Op::T, Op::N, r, t.rows, t.cols, u, dw, gv, false);
        gu.iter_mut().chain(gv.iter_mut()).for_each(|x| *x *= s);
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubLoraConfig {
    pub intrinsic_dim: usize,
    pub rank: usize,
    /// Adapter products are scaled by `lora_alpha / rank`.
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for SubLoraConfig {
    fn default() -> Self {
        SubLoraConfig { intrinsic_dim: 5000, rank: 4, lora_alpha: 32.0, seed: 0 }
    }
}

/// The full reparameterization `w ↦ θ0 + LoRA(a0 + P·w)`.
///
/// `a0` holds Gaussian `U` blocks and zero `V` blocks, so every product
/// `U·V` vanishes at `w = 0` (θ = θ0 exactly) while the gradient with
/// respect to `w` does not.
pub struct SubLora<T> {
    pub cfg: SubLoraConfig,
    pub theta0: Vec<T>,
    pub model_layout: Arc<Layout>,
    pub layout: LoraLayout,
    pub projector: Projector,
    anchor: Vec<T>,
}

impl<T: Real> SubLora<T> {
    pub fn new(model: &Transformer, cfg: SubLoraConfig) -> Result<Self> {
        let theta0 = model.init_params::<T>().values;
        Self::with_base(model, cfg, theta0)
    }

    pub fn with_base(model: &Transformer, cfg: SubLoraConfig, theta0: Vec<T>) -> Result<Self> {
        let layout = LoraLayout::new(model, cfg.rank, cfg.lora_alpha / cfg.rank.max(1) as f64)?;
        let projector = build_projector(layout.d_lora, cfg.intrinsic_dim, cfg.seed)?;
        let mut anchor = vec![T::zero(); layout.d_lora];
        for (j, t) in layout.targets.iter().enumerate() {
            let normal = Normal::new(0.0, 1.0 / (t.rows as f64).sqrt()).expect("positive std");
            let mut r = rng::indexed_stream(cfg.seed, "lora.anchor", j as u64);
            for a in &mut anchor[t.offset..t.offset + t.rows * cfg.rank] {
                *a = T::from_f64_lossy(normal.sample(&mut r));
            }
        }
        if theta0.len() != model.layout.total {
            return Err(Error::DimensionMismatch { what: "θ0", expected: model.layout.total, got: theta0.len() });
        }
        Ok(SubLora { cfg, theta0, model_layout: model.layout.clone(), layout, projector, anchor })
    }

    pub fn d_lora(&self) -> usize {
        self.layout.d_lora
    }

    pub fn adapter(&self, w: &[T]) -> Result<Vec<T>> {
        let mut a = self.anchor.clone();
        self.projector.project_add(w, &mut a)?;
        Ok(a)
    }
}

impl<T: Real> Reparam<T> for SubLora<T> {
    fn dim(&self) -> usize {
        self.cfg.intrinsic_dim
    }

    fn materialize(&self, w: &[T]) -> Result<Vec<T>> {
        lora_expand(&self.theta0, &self.model_layout, &self.layout, &self.adapter(w)?)
    }

    fn grad_mask(&self) -> GradMask {
        self.layout.grad_mask(&self.model_layout)
    }

    fn pullback(&self, w: &[T], grad_theta: &[T]) -> Result<Vec<T>> {
        let a = self.adapter(w)?;
        let g = lora_pullback(&self.model_layout, &self.layout, &a, grad_theta);
        self.projector.transpose(&g)
    }
}

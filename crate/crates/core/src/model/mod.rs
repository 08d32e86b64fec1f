//! Small decoder-only transformer: per-token conditional probabilities,
//! parameter layout, and exact gradients through any reparameterization.

mod config;
pub mod optim;
mod params;
mod transformer;

pub use config::{ModelConfig, INIT_STD, LN_EPS, MLP_RATIO};
pub use params::{build_layout, BlockIndex, Layout, ModelIndex, ParamEntry, ParamKind, ParamVector, Tensor};
pub use transformer::{Cache, GradMask, Inputs, Transformer};

use crate::error::{Error, Result};
use crate::linalg::Real;

pub const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// A differentiable map `w ↦ θ` from trainable coordinates to full model
/// parameters.
pub trait Reparam<T: Real> {
    fn dim(&self) -> usize;

    fn materialize(&self, w: &[T]) -> Result<Vec<T>>;

    /// Tensors of θ whose gradient the pullback consumes.
    fn grad_mask(&self) -> GradMask;

    /// Chain rule: map `∂L/∂θ` to `∂L/∂w` at the point `w`.
    fn pullback(&self, w: &[T], grad_theta: &[T]) -> Result<Vec<T>>;
}

/// Train every parameter directly: `θ = w`.
pub struct Identity {
    layout: std::sync::Arc<Layout>,
}

impl Identity {
    pub fn new(model: &Transformer) -> Self {
        Identity { layout: model.layout.clone() }
    }
}

impl<T: Real> Reparam<T> for Identity {
    fn dim(&self) -> usize {
        self.layout.total
    }

    fn materialize(&self, w: &[T]) -> Result<Vec<T>> {
        if w.len() != self.layout.total {
            return Err(Error::DimensionMismatch { what: "w", expected: self.layout.total, got: w.len() });
        }
        Ok(w.to_vec())
    }

    fn grad_mask(&self) -> GradMask {
        GradMask::all(&self.layout)
    }

    fn pullback(&self, _w: &[T], grad_theta: &[T]) -> Result<Vec<T>> {
        Ok(grad_theta.to_vec())
    }
}

/// Model inputs for whole documents: `[BOS, x_0, …, x_{k-2}]` predicting
/// `[x_0, …, x_{k-1}]`.
pub fn document_inputs<D: AsRef<[u8]>>(cfg: &ModelConfig, docs: &[D]) -> (Inputs, Vec<u32>) {
    let mut inputs = Inputs::default();
    let mut targets = Vec::new();
    let mut seq = Vec::new();
    for d in docs {
        let d = d.as_ref();
        seq.clear();
        seq.push(cfg.bos());
        seq.extend(d[..d.len().saturating_sub(1)].iter().map(|&t| t as u32));
        if d.is_empty() {
            seq.clear();
        }
        inputs.push(&seq);
        targets.extend(d.iter().map(|&t| t as u32));
    }
    (inputs, targets)
}

/// Log-softmax of one logit row in 64-bit precision, base `e`.
pub fn log_softmax_f64<T: Real>(row: &[T], out: &mut [f64]) {
    let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln() + mx;
    for (o, v) in out.iter_mut().zip(row) {
        *o = v.as_f64() - lse;
    }
}

/// Mean cross-entropy (nats) over all rows and its gradient w.r.t. logits.
///
/// Fails on the first sequence whose loss is not finite.
pub fn cross_entropy<T: Real>(
    logits: &[T],
    targets: &[u32],
    vocab: usize,
    inputs: &Inputs,
) -> Result<(f64, Vec<T>)> {
    let rows = targets.len();
    let mut dlogits = vec![T::zero(); logits.len()];
    let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
    let mut total = 0.0;
    for (si, &(start, len)) in inputs.seqs.iter().enumerate() {
        let mut seq_loss = 0.0;
        for r in start..start + len {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = sum.ln() + mx;
            let tgt = targets[r] as usize;
            seq_loss += (lse - row[tgt]).as_f64();
            let d = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (dv, &v) in d.iter_mut().zip(row) {
                *dv = (v - lse).exp() * inv;
            }
            d[tgt] -= inv;
        }
        if !seq_loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch_index: si });
        }
        total += seq_loss;
    }
    Ok((total / rows.max(1) as f64, dlogits))
}

impl Transformer {
    /// Base-2 log-probability rows for every position of `tokens` given its
    /// prefix (position 0 conditions on the beginning-of-document marker).
    pub fn conditional_logprobs<T: Real>(&self, params: &[T], tokens: &[u8]) -> Result<Vec<Vec<f64>>> {
        if tokens.len() > self.cfg.context_length {
            return Err(Error::SequenceTooLong { len: tokens.len(), context: self.cfg.context_length });
        }
        let (inputs, _) = document_inputs(&self.cfg, &[tokens]);
        let cache = self.forward(params, &inputs)?;
        let v = self.cfg.vocab_size;
        Ok(cache
            .logits
            .chunks_exact(v)
            .map(|row| {
                let mut out = vec![0.0; v];
                log_softmax_f64(row, &mut out);
                out.iter_mut().for_each(|x| *x *= LOG2_E);
                out
            })
            .collect())
    }

    /// Mean next-token NLL (nats) of a document batch under `θ = reparam(w)`
    /// and its gradient with respect to `w`.
    pub fn loss_and_grad<T: Real, R: Reparam<T> + ?Sized>(
        &self,
        reparam: &R,
        w: &[T],
        docs: &[&[u8]],
    ) -> Result<(f64, Vec<T>)> {
        let theta = reparam.materialize(w)?;
        let (loss, grad_theta) = self.loss_and_grad_theta(&theta, &reparam.grad_mask(), docs)?;
        let g = reparam.pullback(w, &grad_theta)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok((loss, g))
    }

    pub fn loss_and_grad_theta<T: Real>(&self, theta: &[T], mask: &GradMask, docs: &[&[u8]]) -> Result<(f64, Vec<T>)> {
        let (inputs, targets) = document_inputs(&self.cfg, docs);
        let cache = self.forward(theta, &inputs)?;
        let (loss, dlogits) = cross_entropy(&cache.logits, &targets, self.cfg.vocab_size, &inputs)?;
        let grad = self.backward(theta, &inputs, &cache, &dlogits, mask);
        Ok((loss, grad))
    }

    pub fn loss<T: Real>(&self, theta: &[T], docs: &[&[u8]]) -> Result<f64> {
        let (inputs, targets) = document_inputs(&self.cfg, docs);
        let cache = self.forward(theta, &inputs)?;
        Ok(cross_entropy(&cache.logits, &targets, self.cfg.vocab_size, &inputs)?.0)
    }
}

#[cfg(test)]
mod tests;

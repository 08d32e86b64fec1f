//! Scalar quantization of the trainable coordinates: k-means levels,
//! nearest-level assignment, and quantization-aware training steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{Reparam, Transformer};
use crate::model::optim::{AdamW, AdamWConfig};
use crate::rng;

const KMEANS_MAX_ITERS: usize = 300;

/// Learned levels plus the current assignment of every coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState<T> {
    /// Strictly ascending.
    pub levels: Vec<T>,
    pub assignments: Vec<u32>,
    /// Step size ρ for plain gradient updates.
    pub lr: f64,
}

impl<T: Real> QuantizerState<T> {
    /// k-means levels fit to `w` and the matching assignments.
    pub fn init(w: &[T], levels: usize, lr: f64, seed: u64) -> Result<Self> {
        let wf: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
        let c: Vec<T> = kmeans_levels(&wf, levels, seed)?.into_iter().map(T::from_f64_lossy).collect();
        let (_, assignments) = quantize_assign(w, &c);
        Ok(QuantizerState { levels: c, assignments, lr })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn dequantize(&self) -> Vec<T> {
        self.assignments.iter().map(|&q| self.levels[q as usize]).collect()
    }

    /// Restore ascending order and reassign `w` against the new levels.
    pub fn reassign(&mut self, w: &[T]) {
        self.levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
        self.levels.dedup();
        self.assignments = quantize_assign(w, &self.levels).1;
    }

    /// Round levels to 32-bit floats, the precision they are stored at.
    pub fn round_to_f32(&mut self, w: &[T]) {
        for c in &mut self.levels {
            *c = T::from_f64_lossy(c.as_f64() as f32 as f64);
        }
        self.reassign(w);
    }
}

/// 1-D k-means: k-means++ seeding then Lloyd iterations. Returns ascending
/// levels; fewer than `k` if `w` has fewer distinct values.
pub fn kmeans_levels(w: &[f64], k: usize, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("level count must be positive".into()));
    }
    if w.len() < k {
        return Err(Error::Config(format!("{} levels requested for {} coordinates", k, w.len())));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite coordinate in k-means input".into()));
    }
    let mut xs = w.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = xs.clone();
    distinct.dedup();
    let k = if distinct.len() < k {
        log::warn!("only {} distinct values for {} levels; collapsing duplicates", distinct.len(), k);
        distinct.len()
    } else {
        k
    };

    // k-means++ seeding.
    let mut r = rng::stream(seed, "kmeans");
    let mut centers = vec![xs[r.random_range(0..xs.len())]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            break;
        };
        let c = xs[pick];
        centers.push(c);
        for (d, x) in d2.iter_mut().zip(&xs) {
            *d = d.min((x - c).powi(2));
        }
    }
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    centers.dedup();

    // Lloyd iterations on sorted data: clusters are contiguous runs.
    for _ in 0..KMEANS_MAX_ITERS {
        let bounds = cluster_bounds(&xs, &centers);
        let mut next = Vec::with_capacity(centers.len());
        let mut empty = 0;
        for j in 0..centers.len() {
            let (lo, hi) = (bounds[j], bounds[j + 1]);
            if hi > lo {
                // Clamped so a cluster of equal values keeps that exact value.
                let mean = xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                next.push(mean.clamp(xs[lo], xs[hi - 1]));
            } else {
                empty += 1;
            }
        }
        // Re-seed empty clusters at the worst-fit points.
        for _ in 0..empty {
            let (_, q) = quantize_assign(&xs, &next);
            let worst = (0..xs.len())
                .max_by(|&a, &b| {
                    let ea = (xs[a] - next[q[a] as usize]).abs();
                    let eb = (xs[b] - next[q[b] as usize]).abs();
                    ea.partial_cmp(&eb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            next.push(xs[worst]);
            next.sort_by(|a, b| a.partial_cmp(b).unwrap());
            next.dedup();
        }
        next.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if next == centers {
            break;
        }
        centers = next;
    }
    Ok(centers)
}

/// For sorted `xs` and ascending `levels`, `bounds[j]..bounds[j+1]` are the
/// points assigned to level `j`.
fn cluster_bounds(xs: &[f64], levels: &[f64]) -> Vec<usize> {
    let (_, q) = quantize_assign(xs, levels);
    let mut bounds = vec![0; levels.len() + 1];
    for &a in &q {
        bounds[a as usize + 1] += 1;
    }
    for j in 0..levels.len() {
        bounds[j + 1] += bounds[j];
    }
    bounds
}

/// Nearest ascending level for every coordinate; exact ties go to the lower
/// index.
pub fn quantize_assign<T: Real>(w: &[T], levels: &[T]) -> (Vec<T>, Vec<u32>) {
    assert!(!levels.is_empty(), "no quantization levels");
    let mut q = Vec::with_capacity(w.len());
    let mut hat = Vec::with_capacity(w.len());
    for &x in w {
        // First level not below x; the candidate set is {j-1, j}.
        let j = levels.partition_point(|&c| c < x);
        let best = if j == 0 {
            0
        } else if j == levels.len() || (x - levels[j - 1]) <= (levels[j] - x) {
            j - 1
        } else {
            j
        };
        q.push(best as u32);
        hat.push(levels[best]);
    }
    (hat, q)
}

/// Loss and gradients of one quantization-aware step, evaluated at `ŵ`.
pub struct QatGradients<T> {
    pub loss: f64,
    /// Straight-through gradient: `∂L/∂ŵ` passed to `w` unchanged.
    pub grad_w: Vec<T>,
    /// Per-level sum of `∂L/∂ŵ_i` over the coordinates assigned to it.
    pub grad_levels: Vec<T>,
}

pub fn qat_gradients<T: Real, R: Reparam<T> + ?Sized>(
    model: &Transformer,
    reparam: &R,
    state: &QuantizerState<T>,
    batch: &[&[u8]],
) -> Result<QatGradients<T>> {
    let w_hat = state.dequantize();
    let (loss, grad_w) = model.loss_and_grad(reparam, &w_hat, batch)?;
    let mut grad_levels = vec![T::zero(); state.levels.len()];
    for (&q, &g) in state.assignments.iter().zip(&grad_w) {
        grad_levels[q as usize] += g;
    }
    Ok(QatGradients { loss, grad_w, grad_levels })
}

/// `c ← c − ρ∇c`, `w ← w − ρ∇w`, then re-sort and reassign.
pub fn qat_step<T: Real, R: Reparam<T> + ?Sized>(
    model: &Transformer,
    reparam: &R,
    w: &mut [T],
    state: &mut QuantizerState<T>,
    batch: &[&[u8]],
) -> Result<f64> {
    let g = qat_gradients(model, reparam, state, batch)?;
    let rho = T::from_f64_lossy(state.lr);
    for (x, &gx) in w.iter_mut().zip(&g.grad_w) {
        *x -= rho * gx;
    }
    for (c, &gc) in state.levels.iter_mut().zip(&g.grad_levels) {
        *c -= rho * gc;
    }
    state.reassign(w);
    Ok(g.loss)
}

/// Moment-scaled variant of [`qat_step`]: the same gradients fed through
/// two AdamW optimizers (one for `w`, one for the levels).
pub struct AdamQat {
    w_opt: AdamW,
    c_opt: AdamW,
}

impl AdamQat {
    pub fn new(dim: usize, levels: usize) -> Self {
        let no_decay = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        AdamQat { w_opt: AdamW::new(no_decay.clone(), dim), c_opt: AdamW::new(no_decay, levels) }
    }

    pub fn step<T: Real, R: Reparam<T> + ?Sized>(
        &mut self,
        model: &Transformer,
        reparam: &R,
        w: &mut [T],
        state: &mut QuantizerState<T>,
        batch: &[&[u8]],
    ) -> Result<f64> {
        let g = qat_gradients(model, reparam, state, batch)?;
        let lr = state.lr;
        self.w_opt.step(w, &g.grad_w, lr);
        if self.c_opt.dim() != state.levels.len() {
            // A level merged with a neighbour on the previous reassignment.
            self.c_opt = AdamW::new(self.c_opt.cfg.clone(), state.levels.len());
        }
        self.c_opt.step(&mut state.levels, &g.grad_levels, lr);
        state.reassign(w);
        Ok(g.loss)
    }
}

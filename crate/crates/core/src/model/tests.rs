use super::*;
use crate::rng;
use rand::Rng;

fn tiny() -> Transformer {
    Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, embed_dim: 8, context_length: 8, vocab_size: 16, seed: 5 })
        .unwrap()
}

fn random_doc(len: usize, vocab: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed, "doc");
    (0..len).map(|_| r.random_range(0..vocab) as u8).collect()
}

/// θ0 plus a seeded perturbation so gradients are not at a symmetric point.
fn perturbed(model: &Transformer, scale: f64) -> Vec<f64> {
    let mut theta = model.init_params::<f64>().values;
    let mut r = rng::stream(99, "perturb");
    for v in theta.iter_mut() {
        *v += scale * (r.random::<f64>() - 0.5);
    }
    theta
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let m = tiny();
    let a = m.init_params::<f64>();
    let b = m.init_params::<f64>();
    assert_eq!(a, b);
    for e in m.layout.entries.iter().filter(|e| e.kind == ParamKind::Bias) {
        assert!(a.values[e.range()].iter().all(|&v| v == 0.0), "{}", e.name);
    }
    for e in m.layout.entries.iter().filter(|e| e.kind == ParamKind::Gain) {
        assert!(a.values[e.range()].iter().all(|&v| v == 1.0), "{}", e.name);
    }
}

#[test]
fn init_weight_mean_within_four_sigma() {
    let m = Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, embed_dim: 32, context_length: 16, vocab_size: 64, seed: 1 })
        .unwrap();
    let p = m.init_params::<f64>();
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for e in m.layout.entries.iter().filter(|e| matches!(e.kind, ParamKind::Matrix | ParamKind::Embedding)) {
        for &v in &p.values[e.range()] {
            n += 1;
            sum += v;
            sumsq += v * v;
        }
    }
    assert!(n >= 10_000);
    let mean = sum / n as f64;
    let sd = (sumsq / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() <= 4.0 * sd / (n as f64).sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn flatten_unflatten_roundtrip() {
    let m = tiny();
    let p = m.init_params::<f64>();
    let back = ParamVector::flatten(m.layout.clone(), &p.unflatten()).unwrap();
    assert_eq!(back, p);
    let extents: usize = m.layout.entries.iter().map(|e| e.len()).sum();
    assert_eq!(extents, m.layout.total);
}

#[test]
fn rows_normalize() {
    let m = tiny();
    let theta = perturbed(&m, 0.5);
    let doc = random_doc(8, 16, 1);
    let rows = m.conditional_logprobs(&theta, &doc).unwrap();
    assert_eq!(rows.len(), 8);
    for row in rows {
        assert_eq!(row.len(), 16);
        let s: f64 = row.iter().map(|l| l.exp2()).sum();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn too_long_sequence_rejected() {
    let m = tiny();
    let theta = m.init_params::<f64>().values;
    assert!(matches!(m.conditional_logprobs(&theta, &[0u8; 9]), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn causality() {
    let m = tiny();
    let theta = perturbed(&m, 0.5);
    let a = random_doc(8, 16, 2);
    let base = m.conditional_logprobs(&theta, &a).unwrap();
    for i in 0..8 {
        let mut b = a.clone();
        for t in b.iter_mut().skip(i + 1) {
            *t = (*t + 7) % 16;
        }
        let other = m.conditional_logprobs(&theta, &b).unwrap();
        // Row i predicts token i from tokens < i; changing tokens > i leaves rows ≤ i+1 alone.
        for r in 0..=(i + 1).min(7) {
            for (x, y) in base[r].iter().zip(&other[r]) {
                assert!((x - y).abs() < 1e-12, "row {r} changed after editing positions > {i}");
            }
        }
    }
}

#[test]
fn vocabulary_permutation_commutes() {
    let m = tiny();
    let theta = perturbed(&m, 0.5);
    let v = 16;
    let c = m.cfg.embed_dim;
    let perm: Vec<usize> = (0..v).map(|i| (i * 5 + 3) % v).collect();
    let mut permuted = theta.clone();
    let wte = m.layout.entries[m.index.wte].clone();
    let head = m.layout.entries[m.index.head].clone();
    for (i, &pi) in perm.iter().enumerate() {
        for j in 0..c {
            permuted[wte.offset + pi * c + j] = theta[wte.offset + i * c + j];
            permuted[head.offset + j * v + pi] = theta[head.offset + j * v + i];
        }
    }
    let doc = random_doc(8, v, 3);
    let pdoc: Vec<u8> = doc.iter().map(|&t| perm[t as usize] as u8).collect();
    let a = m.conditional_logprobs(&theta, &doc).unwrap();
    let b = m.conditional_logprobs(&permuted, &pdoc).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (i, &pi) in perm.iter().enumerate() {
            assert!((ra[i] - rb[pi]).abs() < 1e-10);
        }
    }
}

#[test]
fn untrained_bpd_near_uniform() {
    // Monte-Carlo over model seeds and random documents.
    let mut total = 0.0;
    let mut count = 0usize;
    for seed in 0..8 {
        let m = Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, embed_dim: 16, context_length: 32, vocab_size: 64, seed })
            .unwrap();
        let theta = m.init_params::<f64>().values;
        let doc = random_doc(32, 64, seed + 100);
        let rows = m.conditional_logprobs(&theta, &doc).unwrap();
        for (row, &t) in rows.iter().zip(&doc) {
            total -= row[t as usize];
            count += 1;
        }
    }
    let bpd = total / count as f64;
    assert!((bpd - 6.0).abs() < 0.05, "untrained bpd {bpd}");
}

fn check_grad<R: Reparam<f64>>(m: &Transformer, reparam: &R, w: &[f64], docs: &[&[u8]], probes: usize) -> f64 {
    let (_, g) = m.loss_and_grad(reparam, w, docs).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let n = w.len();
    let step = (n / probes).max(1);
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in (0..n).step_by(step) {
        let mut wp = w.to_vec();
        let mut wm = w.to_vec();
        wp[i] += h;
        wm[i] -= h;
        let lp = m.loss(&reparam.materialize(&wp).unwrap(), docs).unwrap();
        let lm = m.loss(&reparam.materialize(&wm).unwrap(), docs).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        // Relative to the larger of the entry and a small fraction of the gradient norm,
        // so coordinates with near-zero gradient do not dominate.
        let denom = fd.abs().max(g[i].abs()).max(1e-3 * gnorm);
        worst = worst.max((fd - g[i]).abs() / denom);
    }
    worst
}

#[test]
fn identity_gradient_matches_finite_differences() {
    let m = tiny();
    assert!(m.num_params() <= 10_000);
    let w = perturbed(&m, 0.4);
    let d1 = random_doc(8, 16, 4);
    let d2 = random_doc(5, 16, 5);
    let err = check_grad(&m, &Identity::new(&m), &w, &[&d1, &d2], 400);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn duplicated_batch_has_same_mean_loss() {
    let m = tiny();
    let theta = perturbed(&m, 0.4);
    let d1 = random_doc(8, 16, 6);
    let d2 = random_doc(8, 16, 7);
    let a = m.loss(&theta, &[&d1, &d2]).unwrap();
    let b = m.loss(&theta, &[&d1, &d2, &d1, &d2]).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn non_finite_loss_names_batch_element() {
    let m = tiny();
    let mut theta = m.init_params::<f64>().values;
    let head = m.layout.entries[m.index.head].clone();
    theta[head.offset] = f64::INFINITY;
    let d = random_doc(4, 16, 8);
    match m.loss(&theta, &[&d]) {
        Err(Error::NonFiniteLoss { batch_index }) => assert_eq!(batch_index, 0),
        other => panic!("expected non-finite loss error, got {other:?}"),
    }
}

//! Central finite differences against the analytic gradients, in f64 on
//! models with at most 1e4 parameters.

use sublora::model::{ModelConfig, Reparam, Transformer};
use sublora::quantizer::{qat_gradients, qat_step, quantize_assign, QuantizerState};
use sublora::rng;
use sublora::sublora::{SubLora, SubLoraConfig};

use rand::Rng;

const H: f64 = 1e-5;

fn tiny() -> Transformer {
    let m = Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, embed_dim: 8, context_length: 12, vocab_size: 256, seed: 11 }).unwrap();
    assert!(m.num_params() <= 10_000, "{}", m.num_params());
    m
}

fn doc(len: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed, "doc");
    (0..len).map(|_| r.random_range(32u8..120)).collect()
}

fn random_w(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "w");
    (0..n).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()
}

fn rel_err(fd: f64, g: f64, gnorm: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3 * gnorm)
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn sublora_gradient_matches_finite_differences() {
    let m = tiny();
    let r: SubLora<f64> = SubLora::new(&m, SubLoraConfig { intrinsic_dim: 60, rank: 2, lora_alpha: 4.0, seed: 5 }).unwrap();
    let w = random_w(60, 0.5, 1);
    let (d1, d2) = (doc(10, 2), doc(7, 3));
    let docs: [&[u8]; 2] = [&d1, &d2];
    let (_, g) = m.loss_and_grad(&r, &w, &docs).unwrap();
    let gnorm = norm(&g);
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += H;
        wm[i] -= H;
        let lp = m.loss(&r.materialize(&wp).unwrap(), &docs).unwrap();
        let lm = m.loss(&r.materialize(&wm).unwrap(), &docs).unwrap();
        worst = worst.max(rel_err((lp - lm) / (2.0 * H), g[i], gnorm));
    }
    assert!(worst <= 1e-4, "relative error {worst}");
}

#[test]
fn sublora_gradient_at_zero_is_nonzero() {
    let m = tiny();
    let r: SubLora<f64> = SubLora::new(&m, SubLoraConfig { intrinsic_dim: 30, rank: 1, lora_alpha: 4.0, seed: 9 }).unwrap();
    let d = doc(12, 4);
    let (_, g) = m.loss_and_grad(&r, &vec![0.0; 30], &[&d]).unwrap();
    assert!(norm(&g) > 0.0);
}

#[test]
fn level_gradients_match_finite_differences_on_levels() {
    let m = tiny();
    let r: SubLora<f64> = SubLora::new(&m, SubLoraConfig { intrinsic_dim: 80, rank: 2, lora_alpha: 4.0, seed: 6 }).unwrap();
    let w = random_w(80, 1.0, 7);
    let state = QuantizerState::init(&w, 5, 0.0, 3).unwrap();
    let d = doc(11, 8);
    let docs: [&[u8]; 1] = [&d];
    let g = qat_gradients(&m, &r, &state, &docs).unwrap();
    let gnorm = norm(&g.grad_levels);
    for k in 0..state.num_levels() {
        // Assignments stay fixed: the derivative is taken with respect to c_k
        // inside ŵ = c[q].
        let shifted = |h: f64| {
            let mut s = state.clone();
            s.levels[k] += h;
            m.loss(&r.materialize(&s.dequantize()).unwrap(), &docs).unwrap()
        };
        let fd = (shifted(H) - shifted(-H)) / (2.0 * H);
        let e = rel_err(fd, g.grad_levels[k], gnorm);
        assert!(e <= 1e-3, "level {k}: fd {fd} vs {} ({e})", g.grad_levels[k]);
    }
}

#[test]
fn zero_step_size_leaves_state_unchanged() {
    let m = tiny();
    let r: SubLora<f64> = SubLora::new(&m, SubLoraConfig { intrinsic_dim: 40, rank: 1, lora_alpha: 4.0, seed: 2 }).unwrap();
    let mut w = random_w(40, 1.0, 3);
    let mut state = QuantizerState::init(&w, 4, 0.0, 1).unwrap();
    let (w0, s0) = (w.clone(), state.clone());
    let d = doc(9, 5);
    qat_step(&m, &r, &mut w, &mut state, &[&d]).unwrap();
    assert_eq!(w, w0);
    assert_eq!(state, s0);
}

#[test]
fn enough_levels_quantize_losslessly() {
    let mut r = rng::stream(12, "values");
    let distinct: Vec<f64> = (0..7).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
    let w: Vec<f64> = (0..300).map(|_| distinct[r.random_range(0..distinct.len())]).collect();
    for c in [7, 9, 16] {
        let s = QuantizerState::init(&w, c, 0.0, 4).unwrap();
        assert_eq!(s.dequantize(), w, "C = {c}");
        let (hat, _) = quantize_assign(&w, &s.levels);
        assert_eq!(hat, w);
    }
}

//! Browser demo: three small operations on the bound and codec, each a
//! JSON string in and a JSON string out.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sublora::bounds::{delta_interval, mc_coverage, subsampled_terms, BoundInputs, SyntheticClass};
use sublora::codec::arith::{decode, empirical_entropy, encode};
use sublora::codec::{prior_complexity, total_size, SizeBreakdown};
use sublora::quantizer::{kmeans_levels, quantize_assign};
use sublora::rng;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Clone, Debug, Deserialize)]
pub struct CurveRequest {
    /// Unsmoothed bits per token, assumed equal for every token.
    pub bpd: f64,
    pub c_h_bits: u64,
    pub m: u64,
    pub n: u64,
    pub confidence: f64,
    pub vocab: usize,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub risk: f64,
    pub delta: f64,
    pub complexity: f64,
    pub subsampling: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub best_alpha: f64,
    pub best_bound: f64,
    pub vacuous_at: f64,
}

/// The BPD bound at each α for a model that assigns probability
/// `2^-bpd` to every token.
pub fn bound_curve(req: &CurveRequest) -> Result<Curve> {
    if req.alphas.is_empty() {
        return Err("no α values".into());
    }
    let prior_nats = prior_complexity(req.c_h_bits).map_err(err)?;
    let p = (-req.bpd).exp2();
    let v = req.vocab as f64;
    let mut points = Vec::with_capacity(req.alphas.len());
    for &alpha in &req.alphas {
        let delta = delta_interval(alpha, req.vocab).map_err(err)?.delta;
        let risk = v.log2() - ((1.0 - alpha) * p * v + alpha).log2();
        let t = subsampled_terms(&BoundInputs { risk, delta, prior_nats, m: req.m, n: req.n, confidence: req.confidence })
            .map_err(err)?;
        points.push(CurvePoint { alpha, risk, delta, complexity: t.complexity, subsampling: t.subsampling, bound: t.total });
    }
    let best = points.iter().min_by(|a, b| a.bound.total_cmp(&b.bound)).unwrap();
    Ok(Curve { best_alpha: best.alpha, best_bound: best.bound, vacuous_at: v.log2(), points })
}

#[derive(Clone, Debug, Deserialize)]
pub struct QuantizeRequest {
    pub count: usize,
    pub levels: usize,
    pub seed: u64,
    /// Share of weights drawn from a second, wider Gaussian.
    #[serde(default)]
    pub outliers: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuantizeResult {
    pub levels: Vec<f32>,
    pub counts: Vec<u64>,
    pub entropy_bits: f64,
    pub size: SizeBreakdown,
    pub bits_per_weight: f64,
    pub mse: f64,
    pub round_trip: bool,
}

/// Draws Gaussian weights, fits k-means levels and arithmetic-codes the
/// assignments.
pub fn quantize_and_encode(req: &QuantizeRequest) -> Result<QuantizeResult> {
    if req.count == 0 || req.count > 1_000_000 {
        return Err("count must be in 1..=1000000".into());
    }
    let mut r = rng::stream(req.seed, "demo.weights");
    let narrow = Normal::new(0.0, 0.05).map_err(err)?;
    let wide = Normal::new(0.0, 0.5).map_err(err)?;
    let w: Vec<f64> = (0..req.count)
        .map(|_| if r.random::<f64>() < req.outliers { wide.sample(&mut r) } else { narrow.sample(&mut r) })
        .collect();
    let levels: Vec<f32> = kmeans_levels(&w, req.levels, req.seed).map_err(err)?.into_iter().map(|c| c as f32).collect();
    let wf: Vec<f32> = w.iter().map(|&x| x as f32).collect();
    let (hat, q) = quantize_assign(&wf, &levels);
    let (bits, counts) = encode(&q, levels.len()).map_err(err)?;
    let round_trip = decode(&bits, &counts, q.len()).map_err(err)? == q;
    let size = total_size(bits.bit_len, levels.len(), &counts, &[]).map_err(err)?;
    let mse = wf.iter().zip(&hat).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / w.len() as f64;
    Ok(QuantizeResult {
        entropy_bits: empirical_entropy(&counts) * q.len() as f64,
        bits_per_weight: size.total_bits as f64 / w.len() as f64,
        levels,
        counts,
        size,
        mse,
        round_trip,
    })
}

#[derive(Clone, Debug, Deserialize)]
pub struct CoverageRequest {
    /// The class has `2^bits` predictors.
    pub bits: u32,
    pub risk: f64,
    pub m: u64,
    pub confidence: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageSummary {
    pub trials: usize,
    pub violations: usize,
    pub rate: f64,
    pub confidence: f64,
}

/// Monte-Carlo violation rate of the finite-hypothesis bound.
pub fn coverage(req: &CoverageRequest) -> Result<CoverageSummary> {
    if req.bits > 12 || req.trials > 100_000 {
        return Err("at most 2^12 predictors and 100000 trials".into());
    }
    let class = if req.bits == 0 { SyntheticClass::singleton(req.risk) } else { SyntheticClass::uniform(req.bits, req.risk) };
    let r = mc_coverage(&class, req.trials, req.m, req.confidence, req.seed).map_err(err)?;
    Ok(CoverageSummary { trials: r.trials, violations: r.violations, rate: r.rate, confidence: req.confidence })
}

fn json_call<Q: for<'de> Deserialize<'de>, A: Serialize>(input: &str, f: impl Fn(&Q) -> Result<A>) -> std::result::Result<String, JsValue> {
    let req: Q = serde_json::from_str(input).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let out = f(&req).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_json(input: &str) -> std::result::Result<String, JsValue> {
    json_call(input, bound_curve)
}

#[wasm_bindgen(js_name = quantizeAndEncode)]
pub fn quantize_json(input: &str) -> std::result::Result<String, JsValue> {
    json_call(input, quantize_and_encode)
}

#[wasm_bindgen(js_name = coverage)]
pub fn coverage_json(input: &str) -> std::result::Result<String, JsValue> {
    json_call(input, coverage)
}

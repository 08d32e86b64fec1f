use sublora_demo::{bound_curve, coverage, quantize_and_encode, CoverageRequest, CurveRequest, QuantizeRequest};

fn curve_request() -> CurveRequest {
    CurveRequest {
        bpd: 4.0,
        c_h_bits: 8000,
        m: 240_788,
        n: 10_000,
        confidence: 0.05,
        vocab: 256,
        alphas: vec![0.001, 0.01, 0.1, 0.5, 1.0],
    }
}

#[test]
fn uniform_smoothing_certifies_log_vocab() {
    let c = bound_curve(&curve_request()).unwrap();
    let last = c.points.last().unwrap();
    assert_eq!((last.risk, last.delta, last.bound), (8.0, 0.0, 8.0));
    assert!(c.best_bound < 8.0 && c.best_alpha < 1.0);
    assert!(c.points.iter().all(|p| p.bound >= c.best_bound));
}

#[test]
fn smoothing_raises_risk_and_narrows_the_interval() {
    let c = bound_curve(&curve_request()).unwrap();
    for w in c.points.windows(2) {
        assert!(w[1].risk >= w[0].risk && w[1].delta <= w[0].delta);
    }
}

#[test]
fn quantized_weights_round_trip_under_budget() {
    let r = quantize_and_encode(&QuantizeRequest { count: 5000, levels: 11, seed: 2, outliers: 0.05 }).unwrap();
    assert!(r.round_trip);
    assert_eq!(r.levels.len(), 11);
    assert_eq!(r.counts.iter().sum::<u64>(), 5000);
    assert!(r.size.payload_bits as f64 <= r.entropy_bits + 34.0);
    assert!(r.levels.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn coverage_is_below_confidence() {
    let s = coverage(&CoverageRequest { bits: 4, risk: 0.4, m: 200, confidence: 0.1, trials: 2000, seed: 3 }).unwrap();
    assert_eq!(s.trials, 2000);
    assert!(s.rate <= 0.1);
}

#[test]
fn bad_requests_are_rejected() {
    assert!(coverage(&CoverageRequest { bits: 20, risk: 0.4, m: 200, confidence: 0.1, trials: 10, seed: 0 }).is_err());
    assert!(quantize_and_encode(&QuantizeRequest { count: 0, levels: 3, seed: 0, outliers: 0.0 }).is_err());
    let mut c = curve_request();
    c.alphas = vec![0.0];
    assert!(bound_curve(&c).is_err());
}

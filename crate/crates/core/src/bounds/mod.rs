//! Bound calculus.
//!
//! Units: risks and interval widths are in bits per token (or error
//! fractions, width 1); the prior and confidence terms are in nats. Each
//! radical is a ratio of nats to a sample count, so it is dimensionless and
//! scales the width.

mod coverage;
mod report;

pub use coverage::{mc_coverage, CoverageResult, SyntheticClass};
pub use report::{audit, AlphaRow, BoundReport, Certificate, ReportInputs, REPORT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::{check_alpha, Metric};

pub const DEFAULT_CONFIDENCE: f64 = 0.05;

/// Range of smoothed per-document BPD, in bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub delta: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `upper = log2(V/α)`, `Δ = log2(1 + (1−α)V/α)`, `lower = upper − Δ`.
pub fn delta_interval(alpha: f64, vocab: usize) -> Result<Interval> {
    check_alpha(alpha)?;
    if vocab < 2 {
        return Err(Error::Config(format!("vocabulary of size {vocab}")));
    }
    let v = vocab as f64;
    let upper = v.log2() - alpha.log2();
    let delta = ((1.0 - alpha) * v / alpha).ln_1p() / std::f64::consts::LN_2;
    Ok(Interval { delta, lower: upper - delta, upper })
}

fn check_confidence(confidence: f64) -> Result<()> {
    if confidence > 0.0 && confidence <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("failure probability {confidence} outside (0, 1]")))
    }
}

/// `R̂ + Δ·sqrt((log 1/P(h) + ln 1/δ) / 2m)`.
pub fn finite_hypothesis_bound(r_hat: f64, delta: f64, prior_nats: f64, m: u64, confidence: f64) -> Result<f64> {
    check_confidence(confidence)?;
    if m == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    Ok(r_hat + delta * ((prior_nats - confidence.ln()) / (2.0 * m as f64)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Subsampled empirical risk `R̂̂`.
    pub risk: f64,
    /// Width of the per-document loss range.
    pub delta: f64,
    pub prior_nats: f64,
    /// Training documents.
    pub m: u64,
    /// Subsampled documents the risk was measured on.
    pub n: u64,
    pub confidence: f64,
}

/// The three terms of the subsampled bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub risk: f64,
    /// `Δ·sqrt((log 1/P(h) + ln 1/(sδ)) / 2m)`.
    pub complexity: f64,
    /// `Δ·sqrt(ln 1/((1−s)δ) / 2n)`.
    pub subsampling: f64,
    pub total: f64,
}

/// Failure probability split `δ1 = sδ`, `δ2 = (1−s)δ` with `s = n/(n+m)`.
pub fn subsampled_terms(inp: &BoundInputs) -> Result<BoundTerms> {
    check_confidence(inp.confidence)?;
    if inp.m == 0 || inp.n == 0 {
        return Err(Error::EmptyInput("training set or subsample"));
    }
    let (m, n) = (inp.m as f64, inp.n as f64);
    let ln_total = (m + n).ln();
    let ln_s = n.ln() - ln_total;
    let ln_1ms = m.ln() - ln_total;
    let ln_delta = inp.confidence.ln();
    let complexity = inp.delta * ((inp.prior_nats - ln_s - ln_delta) / (2.0 * m)).sqrt();
    let subsampling = inp.delta * ((-ln_1ms - ln_delta) / (2.0 * n)).sqrt();
    Ok(BoundTerms { risk: inp.risk, complexity, subsampling, total: inp.risk + complexity + subsampling })
}

pub fn subsampled_bound(inp: &BoundInputs) -> Result<f64> {
    Ok(subsampled_terms(inp)?.total)
}

/// Best smoothing coefficient over a predeclared grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub bound: f64,
    pub rows: Vec<AlphaRow>,
}

/// Evaluates the subsampled BPD bound at every grid value, with `risk(α)`
/// recomputed from cached base-model statistics, and returns the minimizer.
/// Ties go to the smaller α.
pub fn optimize_alpha(
    grid: &[f64],
    vocab: usize,
    mut risk: impl FnMut(f64) -> Result<f64>,
    prior_nats: f64,
    m: u64,
    n: u64,
    confidence: f64,
) -> Result<AlphaChoice> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid("alpha"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let interval = delta_interval(alpha, vocab)?;
        let r = risk(alpha)?;
        let terms = subsampled_terms(&BoundInputs { risk: r, delta: interval.delta, prior_nats, m, n, confidence })?;
        rows.push(AlphaRow { alpha, risk: r, delta: interval.delta, bound: terms.total });
    }
    let best = best_row(&rows).clone();
    Ok(AlphaChoice { alpha: best.alpha, bound: best.bound, rows })
}

fn best_row(rows: &[AlphaRow]) -> &AlphaRow {
    rows.iter()
        .min_by(|a, b| a.bound.total_cmp(&b.bound).then(a.alpha.total_cmp(&b.alpha)))
        .expect("non-empty grid")
}

/// Random-guess level: `log2 V` for BPD, `1 − k/V` for top-k error.
pub fn vacuity_threshold(metric: Metric, vocab: usize) -> f64 {
    match metric {
        Metric::Bpd { .. } => (vocab as f64).log2(),
        Metric::TopK { k } => 1.0 - k.min(vocab) as f64 / vocab as f64,
    }
}

/// Width of a metric's per-document range.
pub fn metric_range(metric: Metric, vocab: usize) -> Result<f64> {
    match metric {
        Metric::Bpd { alpha } => Ok(delta_interval(alpha, vocab)?.delta),
        Metric::TopK { .. } => Ok(1.0),
    }
}

/// Two-part code length of a dataset: `C(h) + C(X | h)`, in bits.
pub fn dataset_compression(c_h_bits: u64, total_nll_bits: f64) -> f64 {
    c_h_bits as f64 + total_nll_bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interval_examples() {
        let i = delta_interval(1.0, 256).unwrap();
        assert_eq!(i.delta, 0.0);
        assert_eq!((i.lower, i.upper), (8.0, 8.0));
        let i = delta_interval(0.5, 2).unwrap();
        assert!((i.delta - 3f64.log2()).abs() < 1e-12);
        assert_eq!(i.upper, 2.0);
        assert!(matches!(delta_interval(0.0, 256), Err(Error::InvalidAlpha(_))));
    }

    #[test]
    fn finite_bound_examples() {
        assert_eq!(finite_hypothesis_bound(0.3, 2.0, 0.0, 10, 1.0).unwrap(), 0.3);
        let slack = |m| finite_hypothesis_bound(0.0, 1.0, 50.0, m, 0.05).unwrap();
        assert!((slack(400) / slack(1600) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn huge_subsample_makes_third_term_vanish() {
        let t = subsampled_terms(&BoundInputs {
            risk: 1.0,
            delta: 3.0,
            prior_nats: 10.0,
            m: 1000,
            n: 1_000_000_000_000,
            confidence: 0.05,
        })
        .unwrap();
        assert!(t.subsampling < 1e-5 * 3.0);
    }

    #[test]
    fn subsampling_costs_more_than_full_evaluation() {
        let (m, d) = (5000u64, 0.05);
        let sub = subsampled_bound(&BoundInputs { risk: 0.2, delta: 1.0, prior_nats: 0.0, m, n: m, confidence: d }).unwrap();
        // With n = m, s = 1/2 and both radicals are sqrt(ln(2/δ)/2m).
        let closed = 0.2 + 2.0 * ((2.0f64 / d).ln() / (2.0 * m as f64)).sqrt();
        assert!((sub - closed).abs() < 1e-14);
        assert!(sub > finite_hypothesis_bound(0.2, 1.0, 0.0, m, d).unwrap());
    }

    #[test]
    fn vacuity_levels() {
        assert!((vacuity_threshold(Metric::Bpd { alpha: 0.1 }, 50257) - 15.617).abs() < 1e-3);
        assert!((vacuity_threshold(Metric::TopK { k: 100 }, 50257) - 0.99801).abs() < 1e-5);
        assert_eq!(vacuity_threshold(Metric::TopK { k: 256 }, 256), 0.0);
    }

    #[test]
    fn alpha_grid_of_one_is_uniform() {
        let c = optimize_alpha(&[1.0], 256, |_| Ok(8.0), 5000.0, 100_000, 10_000, 0.05).unwrap();
        assert_eq!(c.bound, 8.0);
    }

    #[test]
    fn alpha_ties_prefer_smaller() {
        let row = |alpha, bound| AlphaRow { alpha, risk: 0.0, delta: 0.0, bound };
        let rows = [row(0.5, 3.0), row(0.25, 3.0), row(0.1, 4.0)];
        assert_eq!(best_row(&rows).alpha, 0.25);
    }

    #[test]
    fn dataset_compression_adds() {
        assert_eq!(dataset_compression(1000, 64.0 * 8.0), 1512.0);
    }

    fn inputs() -> impl Strategy<Value = BoundInputs> {
        (0.0f64..8.0, 0.01f64..15.0, 0.0f64..1e5, 1u64..1_000_000, 1u64..100_000, 1e-6f64..0.999).prop_map(
            |(risk, delta, prior_nats, m, n, confidence)| BoundInputs { risk, delta, prior_nats, m, n, confidence },
        )
    }

    proptest! {
        #[test]
        fn bound_is_monotone(inp in inputs(), bump in 1.0f64..100.0) {
            let b = subsampled_bound(&inp).unwrap();
            let mut p = inp;
            p.prior_nats += bump;
            prop_assert!(subsampled_bound(&p).unwrap() >= b);
            let mut p = inp;
            p.delta *= 1.0 + bump;
            prop_assert!(subsampled_bound(&p).unwrap() >= b);
            let mut p = inp;
            p.m *= 2;
            prop_assert!(subsampled_bound(&p).unwrap() <= b + 1e-12);
            let mut p = inp;
            p.n *= 2;
            prop_assert!(subsampled_bound(&p).unwrap() <= b + 1e-12);
        }

        #[test]
        fn optimizer_is_a_minimizer(risks in prop::collection::vec(0.0f64..8.0, 8), prior in 0.0f64..1e4) {
            let grid = [0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
            let pick = |a: f64| risks[grid.iter().position(|&g| g == a).unwrap()];
            let c = optimize_alpha(&grid, 256, |a| Ok(pick(a)), prior, 200_000, 10_000, 0.05).unwrap();
            for &a in &grid {
                let d = delta_interval(a, 256).unwrap().delta;
                let b = subsampled_bound(&BoundInputs { risk: pick(a), delta: d, prior_nats: prior, m: 200_000, n: 10_000, confidence: 0.05 }).unwrap();
                prop_assert!(c.bound <= b);
            }
        }
    }
}

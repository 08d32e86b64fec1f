//! Monte-Carlo check that the finite-hypothesis bound holds with the
//! advertised probability on problems whose true risks are known.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::finite_hypothesis_bound;
use crate::error::{Error, Result};
use crate::rng;

/// Finitely many Bernoulli-loss predictors with known true risks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub true_risks: Vec<f64>,
    /// `log 1/P(h)` for each predictor, in nats.
    pub prior_nats: Vec<f64>,
}

impl SyntheticClass {
    pub fn singleton(risk: f64) -> Self {
        SyntheticClass { true_risks: vec![risk], prior_nats: vec![0.0] }
    }

    /// `2^bits` predictors of equal risk under a uniform prior.
    pub fn uniform(bits: u32, risk: f64) -> Self {
        let count = 1usize << bits;
        SyntheticClass { true_risks: vec![risk; count], prior_nats: vec![bits as f64 * std::f64::consts::LN_2; count] }
    }

    pub fn len(&self) -> usize {
        self.true_risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_risks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub trials: usize,
    pub violations: usize,
    pub rate: f64,
}

/// Each trial draws an independent empirical risk from `m` samples for
/// every predictor, picks the predictor with the smallest bound, and counts
/// a violation when its true risk exceeds that bound.
pub fn mc_coverage(class: &SyntheticClass, trials: usize, m: u64, confidence: f64, seed: u64) -> Result<CoverageResult> {
    if class.is_empty() || class.prior_nats.len() != class.len() {
        return Err(Error::Config("synthetic class needs one prior per predictor".into()));
    }
    if trials == 0 {
        return Err(Error::EmptyInput("trials"));
    }
    let dists = class
        .true_risks
        .iter()
        .map(|&p| Binomial::new(m, p).map_err(|e| Error::Config(format!("risk {p}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let violated = |t: usize| -> Result<bool> {
        let mut r = rng::indexed_stream(seed, "coverage", t as u64);
        let mut best = (f64::INFINITY, 0usize);
        for (j, dist) in dists.iter().enumerate() {
            let emp = dist.sample(&mut r) as f64 / m as f64;
            let b = finite_hypothesis_bound(emp, 1.0, class.prior_nats[j], m, confidence)?;
            if b < best.0 {
                best = (b, j);
            }
        }
        Ok(class.true_risks[best.1] > best.0)
    };
    #[cfg(feature = "parallel")]
    let flags: Vec<bool> = {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(violated).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let flags: Vec<bool> = (0..trials).map(violated).collect::<Result<_>>()?;
    let violations = flags.iter().filter(|&&v| v).count();
    Ok(CoverageResult { trials, violations, rate: violations as f64 / trials as f64 })
}

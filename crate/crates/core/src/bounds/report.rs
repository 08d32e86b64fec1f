//! Serialized certificates and their audit.

use serde::{Deserialize, Serialize};

use super::{metric_range, subsampled_terms, vacuity_threshold, BoundInputs, BoundTerms};
use crate::codec::{hyperparam_bits, prior_complexity, total_size, GridChoice, SizeBreakdown};
use crate::error::{Error, Result};
use crate::risk::Metric;

pub const REPORT_VERSION: u32 = 1;
const AUDIT_TOL: f64 = 1e-12;

/// Inputs shared by every metric of one hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub vocab_size: usize,
    /// Training documents.
    pub m: u64,
    /// Subsampled documents.
    pub n: u64,
    pub confidence: f64,
    pub levels: usize,
    pub counts: Vec<u64>,
    pub size: SizeBreakdown,
    pub grids: Vec<GridChoice>,
    /// `log 1/P(h)`, nats.
    pub prior_nats: f64,
}

impl ReportInputs {
    pub fn bound_inputs(&self, risk: f64, delta: f64) -> BoundInputs {
        BoundInputs { risk, delta, prior_nats: self.prior_nats, m: self.m, n: self.n, confidence: self.confidence }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub metric: Metric,
    pub empirical_risk: f64,
    /// Width of the per-document range (bits for BPD, 1 for errors).
    pub delta: f64,
    pub terms: BoundTerms,
    pub bound: f64,
    pub threshold: f64,
    pub vacuous: bool,
}

impl Certificate {
    pub fn new(metric: Metric, empirical_risk: f64, inputs: &ReportInputs) -> Result<Self> {
        let delta = metric_range(metric, inputs.vocab_size)?;
        let terms = subsampled_terms(&inputs.bound_inputs(empirical_risk, delta))?;
        let threshold = vacuity_threshold(metric, inputs.vocab_size);
        Ok(Certificate {
            name: metric.name(),
            metric,
            empirical_risk,
            delta,
            terms,
            bound: terms.total,
            threshold,
            vacuous: terms.total >= threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub risk: f64,
    pub delta: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub format_version: u32,
    pub inputs: ReportInputs,
    pub certificates: Vec<Certificate>,
    /// The BPD bound at every declared smoothing value.
    pub alpha_table: Vec<AlphaRow>,
    /// Model, subspace, training and corpus settings, and seeds.
    pub provenance: serde_json::Value,
}

impl BoundReport {
    pub fn certificate(&self, name: &str) -> Option<&Certificate> {
        self.certificates.iter().find(|c| c.name == name)
    }

    pub fn bpd(&self) -> Option<&Certificate> {
        self.certificate("bpd")
    }
}

fn mismatch(detail: String) -> Error {
    Error::Corrupt { what: "bound report", detail }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= AUDIT_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Recomputes every derived number of a report from its recorded inputs.
pub fn audit(report: &BoundReport) -> Result<()> {
    let inp = &report.inputs;
    let size = total_size(inp.size.payload_bits, inp.levels, &inp.counts, &inp.grids)?;
    if size != inp.size {
        return Err(mismatch(format!("size breakdown {:?} recomputes to {:?}", inp.size, size)));
    }
    if hyperparam_bits(&inp.grids)? != inp.size.hyperparam_bits {
        return Err(mismatch("grid bits".into()));
    }
    let prior = prior_complexity(size.total_bits)?;
    if !close(prior, inp.prior_nats) {
        return Err(mismatch(format!("prior {} recomputes to {prior}", inp.prior_nats)));
    }
    for c in &report.certificates {
        let again = Certificate::new(c.metric, c.empirical_risk, inp)?;
        if !close(again.bound, c.bound) || !close(again.delta, c.delta) || again.threshold != c.threshold {
            return Err(mismatch(format!("{}: bound {} recomputes to {}", c.name, c.bound, again.bound)));
        }
        if c.vacuous != (c.bound >= c.threshold) {
            return Err(mismatch(format!("{}: vacuity flag", c.name)));
        }
    }
    for row in &report.alpha_table {
        let again = Certificate::new(Metric::Bpd { alpha: row.alpha }, row.risk, inp)?;
        if !close(again.bound, row.bound) {
            return Err(mismatch(format!("alpha {}: bound {} recomputes to {}", row.alpha, row.bound, again.bound)));
        }
    }
    if let Some(c) = report.bpd() {
        if let Some(best) = report.alpha_table.iter().map(|r| r.bound).reduce(f64::min) {
            if !close(best, c.bound) {
                return Err(mismatch("BPD certificate is not the alpha-table minimum".into()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> BoundReport {
        let grids = vec![GridChoice::new("alpha", vec![0.1, 1.0], 0.1)];
        let counts = vec![300, 500, 200];
        let size = total_size(1400, 3, &counts, &grids).unwrap();
        let inputs = ReportInputs {
            vocab_size: 256,
            m: 200_000,
            n: 10_000,
            confidence: 0.05,
            levels: 3,
            counts,
            prior_nats: prior_complexity(size.total_bits).unwrap(),
            size,
            grids,
        };
        let rows: Vec<AlphaRow> = [(0.1, 5.0), (1.0, 8.0)]
            .iter()
            .map(|&(alpha, risk)| {
                let c = Certificate::new(Metric::Bpd { alpha }, risk, &inputs).unwrap();
                AlphaRow { alpha, risk, delta: c.delta, bound: c.bound }
            })
            .collect();
        let certificates = vec![
            Certificate::new(Metric::Bpd { alpha: 0.1 }, 5.0, &inputs).unwrap(),
            Certificate::new(Metric::TopK { k: 1 }, 0.6, &inputs).unwrap(),
        ];
        BoundReport { format_version: REPORT_VERSION, inputs, certificates, alpha_table: rows, provenance: serde_json::json!({}) }
    }

    #[test]
    fn serialized_report_audits() {
        let r = report();
        let back: BoundReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        audit(&back).unwrap();
        assert_eq!(r.alpha_table[1].bound, 8.0);
    }

    #[test]
    fn tampering_is_caught() {
        let mut r = report();
        r.certificates[0].bound -= 1e-6;
        assert!(audit(&r).is_err());
        let mut r = report();
        r.inputs.size.payload_bits -= 1;
        assert!(audit(&r).is_err());
        let mut r = report();
        r.certificates[1].vacuous = !r.certificates[1].vacuous;
        assert!(audit(&r).is_err());
    }
}

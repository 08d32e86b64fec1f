//! Grid sweep: train and certify every declared point, keep going past
//! failures, and emit plot-ready tables.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::certify::{certify, Certified};
use super::config::{GridPoint, RunConfig};
use super::train::Job;
use crate::bounds::BoundReport;
use crate::corpus::TokenizedCorpus;
use crate::error::{IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tag: String,
    pub point: GridPoint,
    pub levels: usize,
    /// `ok`, or the error that stopped this point.
    pub status: String,
    pub c_h_bits: Option<u64>,
    pub payload_bits: Option<u64>,
    pub alpha: Option<f64>,
    pub empirical_bpd: Option<f64>,
    pub complexity: Option<f64>,
    pub subsampling: Option<f64>,
    pub bpd_bound: Option<f64>,
    pub top1_bound: Option<f64>,
    pub top10_bound: Option<f64>,
    pub top100_bound: Option<f64>,
    pub vacuous: Option<bool>,
}

impl SweepRow {
    fn failed(tag: String, point: GridPoint, levels: usize, err: String) -> Self {
        SweepRow {
            tag,
            point,
            levels,
            status: err,
            c_h_bits: None,
            payload_bits: None,
            alpha: None,
            empirical_bpd: None,
            complexity: None,
            subsampling: None,
            bpd_bound: None,
            top1_bound: None,
            top10_bound: None,
            top100_bound: None,
            vacuous: None,
        }
    }

    fn from_report(tag: String, point: GridPoint, levels: usize, r: &BoundReport) -> Self {
        let bpd = r.bpd();
        let bound = |name: &str| r.certificate(name).map(|c| c.bound);
        SweepRow {
            tag,
            point,
            levels,
            status: "ok".into(),
            c_h_bits: Some(r.inputs.size.total_bits),
            payload_bits: Some(r.inputs.size.payload_bits),
            alpha: bpd.and_then(|c| match c.metric {
                crate::risk::Metric::Bpd { alpha } => Some(alpha),
                _ => None,
            }),
            empirical_bpd: bpd.map(|c| c.empirical_risk),
            complexity: bpd.map(|c| c.terms.complexity),
            subsampling: bpd.map(|c| c.terms.subsampling),
            bpd_bound: bpd.map(|c| c.bound),
            top1_bound: bound("top1_error"),
            top10_bound: bound("top10_error"),
            top100_bound: bound("top100_error"),
            vacuous: bpd.map(|c| c.vacuous),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the smallest BPD bound.
    pub best: Option<usize>,
    /// Whether `C(h)` strictly increases with `d` within every group that
    /// shares rank, learning rate and level count.
    pub c_h_monotone_in_d: Option<bool>,
    /// Whether the best certificate's α lies strictly inside the grid.
    pub interior_alpha: Option<bool>,
}

impl SweepSummary {
    pub fn best_row(&self) -> Option<&SweepRow> {
        self.best.map(|i| &self.rows[i])
    }
}

pub fn cert_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("certs")
}

pub fn cert_stem(point: &GridPoint, levels: usize) -> String {
    format!("{}_c{levels}", point.tag())
}

pub fn summary_path(out_dir: &Path) -> PathBuf {
    out_dir.join("sweep.json")
}

pub fn load_summary(out_dir: &Path) -> Result<SweepSummary> {
    let p = summary_path(out_dir);
    Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn monotone_c_h(rows: &[SweepRow]) -> Option<bool> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let mut any_group = false;
    for r in &ok {
        let mut group: Vec<(usize, u64)> = ok
            .iter()
            .filter(|o| o.point.rank == r.point.rank && o.point.learning_rate == r.point.learning_rate && o.levels == r.levels)
            .map(|o| (o.point.intrinsic_dim, o.c_h_bits.unwrap()))
            .collect();
        group.sort();
        if group.len() > 1 {
            any_group = true;
            if group.windows(2).any(|w| w[1].1 <= w[0].1) {
                return Some(false);
            }
        }
    }
    any_group.then_some(true)
}

fn summarize(cfg: &RunConfig, rows: Vec<SweepRow>) -> SweepSummary {
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.bpd_bound.map(|b| (i, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    let interior_alpha = best.and_then(|i| rows[i].alpha).map(|a| {
        let g = &cfg.grids.alpha;
        let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        a > lo && a < hi
    });
    SweepSummary { c_h_monotone_in_d: monotone_c_h(&rows), rows, best, interior_alpha }
}

fn write_tables(out_dir: &Path, s: &SweepSummary, best: Option<&Certified>) -> Result<()> {
    let csv = out_dir.join("sweep.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv).at(&csv)?);
    writeln!(
        f,
        "tag,intrinsic_dim,rank,learning_rate,levels,status,c_h_bits,payload_bits,alpha,empirical_bpd,complexity,subsampling,bpd_bound,top1_bound,top10_bound,top100_bound,vacuous"
    )
    .at(&csv)?;
    for r in &s.rows {
        writeln!(
            f,
            "{},{},{},{},{},\"{}\",{},{},{},{},{},{},{},{},{},{},{}",
            r.tag,
            r.point.intrinsic_dim,
            r.point.rank,
            r.point.learning_rate,
            r.levels,
            r.status.replace('"', "'"),
            opt(r.c_h_bits),
            opt(r.payload_bits),
            opt(r.alpha),
            opt(r.empirical_bpd),
            opt(r.complexity),
            opt(r.subsampling),
            opt(r.bpd_bound),
            opt(r.top1_bound),
            opt(r.top10_bound),
            opt(r.top100_bound),
            opt(r.vacuous)
        )
        .at(&csv)?;
    }
    f.flush().at(&csv)?;

    // Complexity against empirical risk, one point per certificate.
    let pareto = out_dir.join("pareto.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&pareto).at(&pareto)?);
    writeln!(f, "tag,intrinsic_dim,levels,c_h_bits,complexity,empirical_bpd,bpd_bound").at(&pareto)?;
    for r in s.rows.iter().filter(|r| r.is_ok()) {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.tag,
            r.point.intrinsic_dim,
            r.levels,
            opt(r.c_h_bits),
            opt(r.complexity),
            opt(r.empirical_bpd),
            opt(r.bpd_bound)
        )
        .at(&pareto)?;
    }
    f.flush().at(&pareto)?;

    if let Some(b) = best {
        let alpha = out_dir.join("alpha.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&alpha).at(&alpha)?);
        writeln!(f, "alpha,risk,delta,bound").at(&alpha)?;
        for row in &b.report.alpha_table {
            writeln!(f, "{},{},{},{}", row.alpha, row.risk, row.delta, row.bound).at(&alpha)?;
        }
        f.flush().at(&alpha)?;
        let p = out_dir.join("best.report.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&b.report)?).at(&p)?;
    }
    let p = summary_path(out_dir);
    std::fs::write(&p, serde_json::to_vec_pretty(s)?).at(&p)
}

/// Trains and certifies every point at every level count.
pub fn run_sweep(cfg: &RunConfig, corpus: &TokenizedCorpus, out_dir: &Path, resume: bool) -> Result<SweepSummary> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut rows = Vec::new();
    let mut certified: Vec<Option<Certified>> = Vec::new();
    for point in cfg.points() {
        let tag = point.tag();
        let outcome = Job::new(cfg, corpus, cfg.model.clone(), point, out_dir, &tag, resume).and_then(|j| j.run());
        match outcome {
            Err(e) => {
                log::warn!("{tag}: {e}");
                for &c in &cfg.grids.levels {
                    rows.push(SweepRow::failed(cert_stem(&point, c), point, c, e.to_string()));
                    certified.push(None);
                }
            }
            Ok((_, quantized)) => {
                for (c, ckpt) in quantized {
                    let stem = cert_stem(&point, c);
                    match certify(cfg, corpus, &ckpt, &cert_dir(out_dir), &stem) {
                        Ok(cert) => {
                            rows.push(SweepRow::from_report(stem, point, c, &cert.report));
                            certified.push(Some(cert));
                        }
                        Err(e) => {
                            log::warn!("{stem}: {e}");
                            rows.push(SweepRow::failed(stem, point, c, e.to_string()));
                            certified.push(None);
                        }
                    }
                }
            }
        }
    }
    let summary = summarize(cfg, rows);
    let best = summary.best.and_then(|i| certified[i].as_ref());
    write_tables(out_dir, &summary, best)?;
    Ok(summary)
}

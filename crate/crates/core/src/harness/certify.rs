//! From a quantized checkpoint to an audited certificate.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{GridPoint, RunConfig};
use crate::bounds::{audit, optimize_alpha, AlphaChoice, BoundReport, Certificate, ReportInputs, REPORT_VERSION};
use crate::codec::{write_hypothesis, CompressedHypothesis};
use crate::corpus::{draw_subsample, TokenizedCorpus};
use crate::error::{Error, IoContext, Result};
use crate::model::{Reparam, Transformer};
use crate::risk::{write_risk_dump, Metric, RiskCache, REPORTED_TOP_K};
use crate::sublora::SubLora;

/// Grid point and level count a checkpoint was trained at.
pub fn point_of(ckpt: &Checkpoint) -> Result<(GridPoint, usize)> {
    let get = |k: &str| {
        ckpt.provenance.get(k).ok_or_else(|| Error::Config(format!("checkpoint provenance lacks `{k}`")))
    };
    let parse_err = |k: &str| Error::Config(format!("checkpoint provenance `{k}` is malformed"));
    let learning_rate = get("learning_rate")?.parse().map_err(|_| parse_err("learning_rate"))?;
    let levels = get("levels")?.parse().map_err(|_| parse_err("levels"))?;
    Ok((GridPoint { intrinsic_dim: ckpt.sublora.intrinsic_dim, rank: ckpt.sublora.rank, learning_rate }, levels))
}

#[derive(Clone, Debug)]
pub struct Certified {
    pub report: BoundReport,
    pub alpha: AlphaChoice,
    /// Per-document statistics of the sample, at the base model.
    pub cache: RiskCache,
    pub report_path: PathBuf,
    pub hypothesis_path: PathBuf,
}

/// Artifact paths written by [`certify`] for a given stem.
pub fn report_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.report.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleProvenance {
    mode: String,
    n: usize,
    seed: u64,
    m: usize,
    window_stride: usize,
    corpus_source_digest: String,
    corpus_token_digest: String,
    split: serde_json::Value,
}

/// Encodes the hypothesis, measures its risk on an i.i.d. subsample of
/// `corpus`, chooses α, and bounds BPD and the reported top-k errors.
pub fn certify(cfg: &RunConfig, corpus: &TokenizedCorpus, ckpt: &Checkpoint, dir: &Path, stem: &str) -> Result<Certified> {
    let (point, c) = point_of(ckpt)?;
    let (levels, assignments) = ckpt.quantized()?;
    let alpha_grid = &cfg.grids.alpha;
    let mut grids = cfg.grid_choices(&point, c, alpha_grid[0])?;
    let mut h = CompressedHypothesis::compress(&levels, &assignments, grids.clone())?;

    let w_hat = h.weights()?;
    if w_hat.iter().zip(&ckpt.w).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Corrupt { what: "hypothesis", detail: "decode does not reproduce the checkpoint".into() });
    }
    let model = Transformer::new(ckpt.model.clone())?;
    let reparam: SubLora<f32> = SubLora::new(&model, ckpt.sublora.clone())?;
    let theta = reparam.materialize(&w_hat)?;

    let m = corpus.len();
    let indices = draw_subsample(m, &cfg.sample)?;
    let cache = RiskCache::build(&model, &theta, corpus, &indices, cfg.window_stride)?;
    let vocab = model.cfg.vocab_size;
    let (m64, n64) = (m as u64, indices.len() as u64);
    let choice = optimize_alpha(alpha_grid, vocab, |a| cache.risk(Metric::Bpd { alpha: a }), h.prior_nats, m64, n64, cfg.confidence)?;

    // The chosen α costs the same bits as the placeholder, so the size holds.
    grids = cfg.grid_choices(&point, c, choice.alpha)?;
    h.grids = grids.clone();

    let inputs = ReportInputs {
        vocab_size: vocab,
        m: m64,
        n: n64,
        confidence: cfg.confidence,
        levels: h.levels.len(),
        counts: h.counts.clone(),
        size: h.size.clone(),
        grids,
        prior_nats: h.prior_nats,
    };
    let mut metrics = vec![Metric::Bpd { alpha: choice.alpha }];
    metrics.extend(REPORTED_TOP_K.iter().map(|&k| Metric::TopK { k }));
    let certificates = metrics
        .into_iter()
        .map(|metric| Certificate::new(metric, cache.risk(metric)?, &inputs))
        .collect::<Result<Vec<_>>>()?;

    let sample = SampleProvenance {
        mode: format!("{:?}", cfg.sample.mode).to_lowercase(),
        n: cfg.sample.n,
        seed: cfg.sample.seed,
        m,
        window_stride: cfg.window_stride,
        corpus_source_digest: corpus.source_digest().to_string(),
        corpus_token_digest: corpus.token_digest(),
        split: serde_json::to_value(corpus.split())?,
    };
    let provenance = serde_json::json!({
        "run": ckpt.provenance,
        "sublora": ckpt.sublora,
        "model": ckpt.model,
        "sample": sample,
    });
    let report = BoundReport { format_version: REPORT_VERSION, inputs, certificates, alpha_table: choice.rows.clone(), provenance };
    audit(&report)?;

    std::fs::create_dir_all(dir).at(dir)?;
    let hypothesis_path = dir.join(format!("{stem}.hyp"));
    write_hypothesis(&hypothesis_path, &ckpt.model, &ckpt.sublora, &h, ckpt.provenance.clone())?;
    write_risk_dump(dir, &format!("{stem}.risk"), &cache.samples(choice.alpha)?)?;
    let report_path = report_path(dir, stem);
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?).at(&report_path)?;
    log::info!(
        "{stem}: C(h) = {} bits, alpha* = {}, BPD bound {:.4} (risk {:.4})",
        h.size.total_bits,
        choice.alpha,
        choice.bound,
        report.bpd().map(|c| c.empirical_risk).unwrap_or(f64::NAN)
    );
    Ok(Certified { report, alpha: choice, cache, report_path, hypothesis_path })
}

pub fn load_report(path: &Path) -> Result<BoundReport> {
    Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
}

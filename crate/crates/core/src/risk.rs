//! Document-level risk: smoothed bits-per-token and top-k error.
//!
//! A forward pass produces, for every token, its base-model log2
//! probability and its rank among the vocabulary. Both metrics are then
//! functions of those cached numbers, so the smoothing coefficient can be
//! chosen after evaluation without touching the model again.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedCorpus;
use crate::error::{Error, IoContext, Result};
use crate::linalg::Real;
use crate::model::{log_softmax_f64, Inputs, Transformer, LOG2_E};

pub const DEFAULT_STRIDE: usize = 100;
pub const REPORTED_TOP_K: [usize; 3] = [1, 10, 100];

/// Base-model statistics of one document's tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    /// `log2 p_θ(x_i | ctx_i)`.
    pub log2p: Vec<f64>,
    /// Number of tokens ranked ahead of the true one: strictly more
    /// probable, or equally probable with a smaller index.
    pub rank: Vec<u32>,
}

impl TokenStats {
    pub fn len(&self) -> usize {
        self.log2p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log2p.is_empty()
    }

    /// `−(1/n)·Σ log2[(1−α)p + α/V]`, evaluated as
    /// `log2 V − mean log2[(1−α)pV + α]` so that `α = 1` gives `log2 V`
    /// exactly.
    pub fn smoothed_bpd(&self, alpha: f64, vocab: usize) -> Result<f64> {
        check_alpha(alpha)?;
        if self.is_empty() {
            return Err(Error::EmptyInput("document"));
        }
        let v = vocab as f64;
        let s: f64 = self.log2p.iter().map(|&l| ((1.0 - alpha) * l.exp2() * v + alpha).log2()).sum();
        Ok(v.log2() - s / self.len() as f64)
    }

    pub fn topk_error(&self, k: usize) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.rank.iter().filter(|&&r| (r as usize) < k).count();
        1.0 - hits as f64 / self.len() as f64
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// One evaluation pass: the model input and, for each output row that is
/// scored, the document position it predicts.
struct Window {
    input: Vec<u32>,
    /// `(input row, document position)`.
    scored: Vec<(usize, usize)>,
}

/// Windows covering a document of `n` tokens.
///
/// Positions below `L` see the beginning-of-document marker and the whole
/// prefix. Beyond that, tokens are scored in chunks of `stride`: with
/// 1-based position `i > L`, the context is the trailing
/// `L − ((L − i) mod stride)` tokens, so every chunk shares one window of
/// `L` tokens ending just before the chunk's last position.
fn windows(doc: &[u8], context: usize, stride: usize, bos: u32) -> Vec<Window> {
    let n = doc.len();
    let mut out = Vec::new();
    let first = n.min(context);
    let mut input = Vec::with_capacity(first);
    input.push(bos);
    input.extend(doc[..first - 1].iter().map(|&t| t as u32));
    out.push(Window { input, scored: (0..first).map(|j| (j, j)).collect() });
    // Chunks of positions [lo, hi) (0-based) with a shared window start.
    let mut lo = context;
    while lo < n {
        let hi = (lo + stride).min(n);
        let start = lo + stride - 1 - context;
        let input = doc[start..hi - 1].iter().map(|&t| t as u32).collect();
        let scored = (lo..hi).map(|j| (j - 1 - start, j)).collect();
        out.push(Window { input, scored });
        lo += stride;
    }
    out
}

fn rank_of(row: &[f64], target: usize) -> u32 {
    let pt = row[target];
    row.iter().enumerate().filter(|&(t, &p)| p > pt || (p == pt && t < target)).count() as u32
}

/// Base-model statistics of every token of `doc`, windowed for documents
/// longer than the context.
pub fn doc_token_stats<T: Real>(model: &Transformer, theta: &[T], doc: &[u8], stride: usize) -> Result<TokenStats> {
    if doc.is_empty() {
        return Err(Error::EmptyInput("document"));
    }
    let l = model.cfg.context_length;
    if stride == 0 || stride > l {
        return Err(Error::Config(format!("window stride {stride} outside 1..={l}")));
    }
    let v = model.cfg.vocab_size;
    let ws = windows(doc, l, stride, model.cfg.bos());
    let inputs = Inputs::new(&ws.iter().map(|w| w.input.clone()).collect::<Vec<_>>());
    let cache = model.forward(theta, &inputs)?;
    let mut stats = TokenStats { log2p: vec![0.0; doc.len()], rank: vec![0; doc.len()] };
    let mut row = vec![0.0; v];
    for (w, &(first_row, _)) in ws.iter().zip(&inputs.seqs) {
        for &(r, j) in &w.scored {
            let logits = &cache.logits[(first_row + r) * v..(first_row + r + 1) * v];
            log_softmax_f64(logits, &mut row);
            let t = doc[j] as usize;
            stats.log2p[j] = row[t] * LOG2_E;
            stats.rank[j] = rank_of(&row, t);
        }
    }
    Ok(stats)
}

pub fn doc_bpd<T: Real>(model: &Transformer, theta: &[T], doc: &[u8], alpha: f64, stride: usize) -> Result<f64> {
    check_alpha(alpha)?;
    doc_token_stats(model, theta, doc, stride)?.smoothed_bpd(alpha, model.cfg.vocab_size)
}

pub fn doc_topk_error<T: Real>(model: &Transformer, theta: &[T], doc: &[u8], k: usize, stride: usize) -> Result<f64> {
    if k == 0 || k > model.cfg.vocab_size {
        return Err(Error::Config(format!("k = {k} outside 1..={}", model.cfg.vocab_size)));
    }
    Ok(doc_token_stats(model, theta, doc, stride)?.topk_error(k))
}

/// Statistics for each listed document, in order. Fans out across threads
/// when the `parallel` feature is on; results do not depend on it.
pub fn evaluate_documents<T: Real>(
    model: &Transformer,
    theta: &[T],
    corpus: &TokenizedCorpus,
    indices: &[usize],
    stride: usize,
) -> Result<Vec<TokenStats>> {
    let one = |&i: &usize| doc_token_stats(model, theta, corpus.document(i), stride);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        indices.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        indices.iter().map(one).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    /// Smoothed bits per token, range `Δ`.
    Bpd { alpha: f64 },
    /// Top-k error, range 1.
    TopK { k: usize },
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Bpd { .. } => "bpd".into(),
            Metric::TopK { k } => format!("top{k}_error"),
        }
    }

    pub fn of(&self, stats: &TokenStats, vocab: usize) -> Result<f64> {
        match *self {
            Metric::Bpd { alpha } => stats.smoothed_bpd(alpha, vocab),
            Metric::TopK { k } => Ok(stats.topk_error(k)),
        }
    }
}

/// Cached per-document statistics of a sample drawn with replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCache {
    pub vocab_size: usize,
    /// Sampled corpus indices, repeats included.
    pub indices: Vec<usize>,
    pub stats: Vec<TokenStats>,
}

impl RiskCache {
    pub fn build<T: Real>(
        model: &Transformer,
        theta: &[T],
        corpus: &TokenizedCorpus,
        indices: &[usize],
        stride: usize,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("sample"));
        }
        // Evaluate each distinct document once.
        let mut unique = indices.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let evaluated = evaluate_documents(model, theta, corpus, &unique, stride)?;
        let stats = indices.iter().map(|i| evaluated[unique.binary_search(i).unwrap()].clone()).collect();
        Ok(RiskCache { vocab_size: model.cfg.vocab_size, indices: indices.to_vec(), stats })
    }

    /// `R̂̂`: mean per-document metric over the sample.
    pub fn risk(&self, metric: Metric) -> Result<f64> {
        let mut sum = 0.0;
        for s in &self.stats {
            sum += metric.of(s, self.vocab_size)?;
        }
        Ok(sum / self.stats.len() as f64)
    }

    pub fn samples(&self, alpha: f64) -> Result<Vec<RiskSample>> {
        self.indices
            .iter()
            .zip(&self.stats)
            .map(|(&doc_index, s)| {
                Ok(RiskSample {
                    doc_index,
                    length: s.len(),
                    bpd: s.smoothed_bpd(alpha, self.vocab_size)?,
                    top1_error: s.topk_error(1),
                    top10_error: s.topk_error(10),
                    top100_error: s.topk_error(100),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub doc_index: usize,
    pub length: usize,
    pub bpd: f64,
    pub top1_error: f64,
    pub top10_error: f64,
    pub top100_error: f64,
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_risk_dump(dir: &Path, stem: &str, samples: &[RiskSample]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv).at(&csv)?);
    writeln!(f, "doc_index,length,bpd,top1_error,top10_error,top100_error").at(&csv)?;
    for s in samples {
        writeln!(f, "{},{},{},{},{},{}", s.doc_index, s.length, s.bpd, s.top1_error, s.top10_error, s.top100_error)
            .at(&csv)?;
    }
    f.flush().at(&csv)?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_vec_pretty(samples)?).at(&json)
}

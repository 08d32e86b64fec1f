//! End-to-end orchestration: ingest, train, certify, sweep, follow-up
//! experiments and a summary report. Every command takes the same
//! [`RunConfig`] and writes under one output directory.

pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod sweep;
pub mod train;

pub use certify::{certify, Certified};
pub use checkpoint::Checkpoint;
pub use config::{GridPoint, RunConfig};
pub use experiments::{run_experiments, ExperimentsReport};
pub use sweep::{run_sweep, SweepSummary};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bounds::{audit, BoundReport};
use crate::corpus::{ingest, read_sources, TokenizedCorpus};
use crate::error::{Error, IoContext, Result};

/// Reads the configured sources and stores the tokenized corpus.
pub fn cmd_ingest(cfg: &RunConfig, out_dir: &Path) -> Result<TokenizedCorpus> {
    if cfg.corpus.sources.is_empty() {
        return Err(Error::Config("no corpus sources configured".into()));
    }
    let raw = read_sources(&cfg.corpus.sources)?;
    let corpus = ingest(&raw, &cfg.corpus.ingest_options())?;
    let dir = cfg.corpus_dir(out_dir);
    corpus.save(&dir)?;
    log::info!("ingested {} documents, {} tokens into {}", corpus.len(), corpus.total_tokens(), dir.display());
    Ok(corpus)
}

/// The stored corpus, ingesting it first if it is missing.
pub fn load_corpus(cfg: &RunConfig, out_dir: &Path) -> Result<TokenizedCorpus> {
    let dir = cfg.corpus_dir(out_dir);
    if dir.join("manifest.json").exists() {
        let c = TokenizedCorpus::load(&dir)?;
        if c.split() != &cfg.corpus.split {
            return Err(Error::Config(format!("corpus in {} was split differently", dir.display())));
        }
        Ok(c)
    } else {
        cmd_ingest(cfg, out_dir)
    }
}

fn write_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let p = out_dir.join("config.json");
    std::fs::write(&p, cfg.canonical()).at(&p)
}

/// Trains the first configured point; returns its quantized checkpoints.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<Vec<PathBuf>> {
    write_config(cfg, out_dir)?;
    let corpus = load_corpus(cfg, out_dir)?;
    let point = cfg.points()[0];
    let job = train::Job::new(cfg, &corpus, cfg.model.clone(), point, out_dir, &point.tag(), resume)?;
    job.run()?;
    Ok(cfg.grids.levels.iter().map(|&c| job.paths.quantized(c)).collect())
}

pub fn cmd_certify(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Certified> {
    let corpus = load_corpus(cfg, out_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("hypothesis");
    let (point, _) = certify::point_of(&ckpt)?;
    let name = format!("{}_{stem}", point.tag());
    certify(cfg, &corpus, &ckpt, &sweep::cert_dir(out_dir), &name)
}

pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<SweepSummary> {
    write_config(cfg, out_dir)?;
    let corpus = load_corpus(cfg, out_dir)?;
    run_sweep(cfg, &corpus, out_dir, resume)
}

pub fn cmd_experiments(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<ExperimentsReport> {
    let corpus = load_corpus(cfg, out_dir)?;
    run_experiments(cfg, &corpus, out_dir, resume)
}

fn report_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).at(dir)? {
        let p = e.at(dir)?.path();
        if p.to_string_lossy().ends_with(".report.json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn table_row(name: &str, r: &BoundReport) -> String {
    let b = |k: &str| r.certificate(k).map(|c| c.bound).unwrap_or(f64::NAN);
    let v = |k: &str| r.certificate(k).map(|c| if c.vacuous { "yes" } else { "no" }).unwrap_or("-");
    format!(
        "| {name} | {} | {:.4} ({}) | {} ({}) | {} ({}) | {} ({}) |",
        r.inputs.size.total_bits,
        b("bpd"),
        v("bpd"),
        pct(b("top1_error")),
        v("top1_error"),
        pct(b("top10_error")),
        v("top10_error"),
        pct(b("top100_error")),
        v("top100_error"),
    )
}

/// Audits every stored certificate and renders a markdown summary to
/// `report.md`. Fails if any certificate does not recompute.
pub fn cmd_report(out_dir: &Path) -> Result<String> {
    let mut md = String::new();
    let head = "| certificate | C(h) bits | BPD bound (vacuous) | top-1 error % | top-10 error % | top-100 error % |\n|---|---|---|---|---|---|";
    let mut audited = 0;
    for dir in [sweep::cert_dir(out_dir), experiments::experiments_dir(out_dir)] {
        let files = report_files(&dir)?;
        if files.is_empty() {
            continue;
        }
        writeln!(md, "## {}\n\n{head}", dir.file_name().unwrap().to_string_lossy()).unwrap();
        for f in files {
            let r = certify::load_report(&f)?;
            audit(&r).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
            audited += 1;
            let name = f.file_name().unwrap().to_string_lossy().trim_end_matches(".report.json").to_string();
            writeln!(md, "{}", table_row(&name, &r)).unwrap();
        }
        md.push('\n');
    }
    if let Ok(s) = sweep::load_summary(out_dir) {
        writeln!(md, "## sweep\n").unwrap();
        if let Some(b) = s.best_row() {
            writeln!(md, "best: {} with BPD bound {:.4}", b.tag, b.bpd_bound.unwrap_or(f64::NAN)).unwrap();
        }
        writeln!(md, "C(h) strictly increasing in d: {:?}", s.c_h_monotone_in_d).unwrap();
        writeln!(md, "interior optimal alpha: {:?}\n", s.interior_alpha).unwrap();
    }
    if let Ok(e) = experiments::load_experiments(out_dir) {
        writeln!(md, "## experiments\n").unwrap();
        if let Some(p) = &e.permutation {
            writeln!(
                md,
                "permuted tokens: BPD bound {:.4} vs {:.4} clean (permuted not better: {})",
                p.permuted_bpd_bound, p.clean_bpd_bound, p.permuted_not_better
            )
            .unwrap();
        }
        if let Some(s) = &e.sequence_level {
            writeln!(
                md,
                "sequence level ({} tokens): BPD bound {:.4} vs {:.4} per document, relative difference {:.3}",
                s.sequence_length, s.sequence_bpd_bound, s.document_bpd_bound, s.relative_difference
            )
            .unwrap();
        }
        if !e.scaling.is_empty() {
            writeln!(md, "\n| layers x heads x width | params | C(h) bits | data bits | total bits | BPD bound |\n|---|---|---|---|---|---|").unwrap();
            for r in &e.scaling {
                writeln!(
                    md,
                    "| {}x{}x{} | {} | {} | {:.0} | {:.0} | {:.4} |",
                    r.shape.n_layers, r.shape.n_heads, r.shape.embed_dim, r.num_params, r.c_h_bits, r.data_bits, r.total_bits, r.bpd_bound
                )
                .unwrap();
            }
            writeln!(md, "\ntotal code length decreasing with size: {:?}", e.compression_decreasing).unwrap();
        }
    }
    writeln!(md, "\n{audited} certificates audited").unwrap();
    let p = out_dir.join("report.md");
    std::fs::write(&p, &md).at(&p)?;
    Ok(md)
}

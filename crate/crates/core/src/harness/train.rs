//! Training one grid point: SubLoRA coordinates from zero under AdamW, then
//! quantization-aware fine-tuning for each declared level count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{GridPoint, QatOptimizer, RunConfig};
use crate::corpus::TokenizedCorpus;
use crate::error::{Error, IoContext, Result};
use crate::model::optim::AdamW;
use crate::model::{ModelConfig, Transformer, LOG2_E};
use crate::quantizer::{qat_step, AdamQat, QuantizerState};
use crate::rng;
use crate::sublora::{SubLora, SubLoraConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// `train` or `qat<C>`.
    pub phase: String,
    pub lr: f64,
    /// Batch loss in bits per token.
    pub loss_bits: f64,
}

/// Linear warmup then cosine decay to `min_ratio · peak` at `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = peak * min_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Documents of batch `step`, drawn uniformly with replacement from a
/// stream keyed by the step so resumed runs see the same batches.
pub fn batch(corpus: &TokenizedCorpus, seed: u64, step: usize, size: usize) -> Vec<&[u8]> {
    let mut r = rng::indexed_stream(seed, "batches", step as u64);
    (0..size).map(|_| corpus.document(r.random_range(0..corpus.len()))).collect()
}

pub fn sublora_config(cfg: &RunConfig, point: &GridPoint) -> SubLoraConfig {
    SubLoraConfig {
        intrinsic_dim: point.intrinsic_dim,
        rank: point.rank,
        lora_alpha: cfg.train.lora_alpha,
        seed: rng::derive(cfg.seed, "sublora", 0),
    }
}

/// Settings recorded in every checkpoint, hypothesis file and report.
pub fn provenance(cfg: &RunConfig, point: &GridPoint, model: &ModelConfig) -> BTreeMap<String, String> {
    let t = &cfg.train;
    BTreeMap::from([
        ("seed".into(), cfg.seed.to_string()),
        ("model".into(), model.architecture_tag()),
        ("model_seed".into(), model.seed.to_string()),
        ("intrinsic_dim".into(), point.intrinsic_dim.to_string()),
        ("rank".into(), point.rank.to_string()),
        ("learning_rate".into(), point.learning_rate.to_string()),
        ("lora_alpha".into(), t.lora_alpha.to_string()),
        ("steps".into(), t.steps.to_string()),
        ("batch_size".into(), t.batch_size.to_string()),
        ("warmup_steps".into(), t.warmup_steps.to_string()),
        ("min_lr_ratio".into(), t.min_lr_ratio.to_string()),
        ("qat_fraction".into(), t.qat_fraction.to_string()),
        ("qat_lr".into(), t.qat_lr.to_string()),
        ("qat_optimizer".into(), format!("{:?}", t.qat_optimizer).to_lowercase()),
        ("context_length".into(), model.context_length.to_string()),
        ("deterministic".into(), cfg.deterministic.to_string()),
    ])
}

/// Where one grid point's artifacts live.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path, tag: &str) -> Self {
        RunPaths { dir: out_dir.join("runs").join(tag) }
    }

    pub fn base(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }

    pub fn partial(&self) -> PathBuf {
        self.dir.join("partial.ckpt")
    }

    pub fn quantized(&self, levels: usize) -> PathBuf {
        self.dir.join(format!("q{levels}.ckpt"))
    }

    fn curve(&self, phase: &str) -> PathBuf {
        self.dir.join(format!("loss_{phase}.json"))
    }
}

fn write_curve(paths: &RunPaths, phase: &str, curve: &[CurvePoint]) -> Result<()> {
    std::fs::create_dir_all(&paths.dir).at(&paths.dir)?;
    let json = paths.curve(phase);
    std::fs::write(&json, serde_json::to_vec(curve)?).at(&json)?;
    let csv = json.with_extension("csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv).at(&csv)?);
    writeln!(f, "step,phase,lr,loss_bits").at(&csv)?;
    for c in curve {
        writeln!(f, "{},{},{},{}", c.step, c.phase, c.lr, c.loss_bits).at(&csv)?;
    }
    f.flush().at(&csv)
}

fn read_curve(paths: &RunPaths, phase: &str, upto: usize) -> Result<Vec<CurvePoint>> {
    let p = paths.curve(phase);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let mut c: Vec<CurvePoint> = serde_json::from_slice(&std::fs::read(&p).at(&p)?)?;
    c.retain(|x| x.step < upto);
    Ok(c)
}

fn diverged(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| {
        log::error!("training diverged at step {step}: {e}");
        Error::Diverged { step, source: Box::new(e) }
    }
}

fn check_matches(ckpt: &Checkpoint, model: &ModelConfig, sub: &SubLoraConfig, path: &Path) -> Result<()> {
    if &ckpt.model != model || &ckpt.sublora != sub {
        return Err(Error::Config(format!("{} was written for a different configuration", path.display())));
    }
    Ok(())
}

/// A grid point bound to its corpus and model.
pub struct Job<'a> {
    pub cfg: &'a RunConfig,
    pub corpus: &'a TokenizedCorpus,
    pub model: Transformer,
    pub point: GridPoint,
    pub sublora: SubLoraConfig,
    pub paths: RunPaths,
    pub resume: bool,
}

impl<'a> Job<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        corpus: &'a TokenizedCorpus,
        model: ModelConfig,
        point: GridPoint,
        out_dir: &Path,
        tag: &str,
        resume: bool,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("training corpus"));
        }
        if corpus.vocab_size() != model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                corpus.vocab_size(),
                model.vocab_size
            )));
        }
        Ok(Job {
            cfg,
            corpus,
            sublora: sublora_config(cfg, &point),
            model: Transformer::new(model)?,
            point,
            paths: RunPaths::new(out_dir, tag),
            resume,
        })
    }

    pub fn reparam(&self) -> Result<SubLora<f32>> {
        SubLora::new(&self.model, self.sublora.clone())
    }

    fn checkpoint(&self, step: usize, w: Vec<f32>) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            sublora: self.sublora.clone(),
            step,
            w,
            levels: None,
            adam: None,
            provenance: provenance(self.cfg, &self.point, &self.model.cfg),
        }
    }

    fn load_if_resuming(&self, path: &Path) -> Result<Option<Checkpoint>> {
        if !self.resume || !path.exists() {
            return Ok(None);
        }
        let c = Checkpoint::load(path)?;
        check_matches(&c, &self.model.cfg, &self.sublora, path)?;
        Ok(Some(c))
    }

    /// Continuous training up to the QAT tail; writes `base.ckpt`.
    pub fn train_base(&self, reparam: &SubLora<f32>) -> Result<Checkpoint> {
        let t = &self.cfg.train;
        let total = t.main_steps();
        if let Some(c) = self.load_if_resuming(&self.paths.base())? {
            if c.step != total {
                return Err(Error::Config(format!("{} holds {} steps, config asks for {total}", self.paths.base().display(), c.step)));
            }
            log::info!("{}: reusing {}", self.paths.dir.display(), self.paths.base().display());
            return Ok(c);
        }
        let (base, curve) = self.train_until(reparam, total)?;
        base.save(&self.paths.base())?;
        write_curve(&self.paths, "train", &curve)?;
        let partial = self.paths.partial();
        if partial.exists() {
            std::fs::remove_file(&partial).at(&partial)?;
        }
        Ok(base)
    }

    /// Runs the continuous phase from zero, or from the snapshot when
    /// resuming, through step `stop`. Snapshots are written on the way;
    /// the returned checkpoint carries the optimizer state.
    pub fn train_until(&self, reparam: &SubLora<f32>, stop: usize) -> Result<(Checkpoint, Vec<CurvePoint>)> {
        let t = &self.cfg.train;
        let total = t.main_steps();
        let mut w = vec![0.0f32; self.sublora.intrinsic_dim];
        let mut opt = AdamW::new(t.adamw.clone(), w.len());
        let mut start = 0;
        let mut curve = Vec::new();
        if let Some(p) = self.load_if_resuming(&self.paths.partial())? {
            let (m, v, s) = p.adam.clone().ok_or_else(|| Error::Config("snapshot lacks optimizer state".into()))?;
            opt.restore(m, v, s)?;
            start = p.step;
            w = p.w;
            curve = read_curve(&self.paths, "train", start)?;
            log::info!("{}: resuming at step {start}", self.paths.dir.display());
        }
        for step in start..stop {
            let lr = learning_rate(step, total, t.warmup_steps, self.point.learning_rate, t.min_lr_ratio);
            let docs = batch(self.corpus, self.cfg.seed, step, t.batch_size);
            let (loss, g) = self.model.loss_and_grad(reparam, &w, &docs).map_err(diverged(step))?;
            opt.step(&mut w, &g, lr);
            if t.log_every > 0 && (step % t.log_every == 0 || step + 1 == total) {
                let bits = loss * LOG2_E;
                log::info!("{} step {step}/{total} lr {lr:.3e} loss {bits:.4} bits", self.point.tag());
                curve.push(CurvePoint { step, phase: "train".into(), lr, loss_bits: bits });
            }
            if t.checkpoint_every > 0 && (step + 1) % t.checkpoint_every == 0 && step + 1 < total {
                let mut snap = self.checkpoint(step + 1, w.clone());
                let (m, v, s) = opt.state();
                snap.adam = Some((m.to_vec(), v.to_vec(), s));
                snap.save(&self.paths.partial())?;
                write_curve(&self.paths, "train", &curve)?;
            }
        }
        let mut ckpt = self.checkpoint(stop.max(start), w);
        let (m, v, s) = opt.state();
        ckpt.adam = Some((m.to_vec(), v.to_vec(), s));
        Ok((ckpt, curve))
    }

    /// Quantization-aware tail from `base` with `levels` clusters; writes
    /// `q<levels>.ckpt` holding `ŵ` and the 32-bit levels.
    pub fn quantize(&self, reparam: &SubLora<f32>, base: &Checkpoint, levels: usize) -> Result<Checkpoint> {
        let path = self.paths.quantized(levels);
        if let Some(c) = self.load_if_resuming(&path)? {
            return Ok(c);
        }
        let t = &self.cfg.train;
        let mut w = base.w.clone();
        let kseed = rng::derive(self.cfg.seed, "kmeans", levels as u64);
        let mut state = QuantizerState::init(&w, levels, t.qat_lr, kseed)?;
        let mut adam = AdamQat::new(w.len(), state.num_levels());
        let phase = format!("qat{levels}");
        let mut curve = Vec::new();
        for s in 0..t.qat_steps() {
            let step = base.step + s;
            let docs = batch(self.corpus, self.cfg.seed, step, t.batch_size);
            let loss = match t.qat_optimizer {
                QatOptimizer::Sgd => qat_step(&self.model, reparam, &mut w, &mut state, &docs),
                QatOptimizer::Adamw => adam.step(&self.model, reparam, &mut w, &mut state, &docs),
            }
            .map_err(diverged(step))?;
            if t.log_every > 0 && (s % t.log_every == 0 || s + 1 == t.qat_steps()) {
                let bits = loss * LOG2_E;
                log::info!("{} {phase} step {step} loss {bits:.4} bits", self.point.tag());
                curve.push(CurvePoint { step, phase: phase.clone(), lr: t.qat_lr, loss_bits: bits });
            }
        }
        state.round_to_f32(&w);
        let mut q = self.checkpoint(base.step + t.qat_steps(), state.dequantize());
        q.levels = Some(state.levels.clone());
        q.provenance.insert("levels".into(), levels.to_string());
        q.save(&path)?;
        write_curve(&self.paths, &phase, &curve)?;
        Ok(q)
    }

    /// Base training then one quantized checkpoint per declared level count.
    pub fn run(&self) -> Result<(Checkpoint, Vec<(usize, Checkpoint)>)> {
        self.run_levels(&self.cfg.grids.levels)
    }

    pub fn run_levels(&self, levels: &[usize]) -> Result<(Checkpoint, Vec<(usize, Checkpoint)>)> {
        let reparam = self.reparam()?;
        let base = self.train_base(&reparam)?;
        let mut out = Vec::new();
        for &c in levels {
            out.push((c, self.quantize(&reparam, &base, c)?));
        }
        Ok((base, out))
    }
}

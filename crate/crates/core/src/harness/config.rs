//! Run configuration: one JSON document declaring the corpus, the model,
//! every searched grid, and all seeds before anything is trained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::GridChoice;
use crate::corpus::{IngestOptions, SampleSpec, SplitPolicy};
use crate::error::{Error, IoContext, Result};
use crate::model::optim::AdamWConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CorpusConfig {
    /// Raw text files or directories, read in sorted order.
    pub sources: Vec<PathBuf>,
    pub split: SplitPolicy,
    pub hard_cap: Option<usize>,
    /// Where the ingested corpus lives; `<out-dir>/corpus` when unset.
    pub dir: Option<PathBuf>,
}


impl CorpusConfig {
    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions { split: self.split.clone(), hard_cap: self.hard_cap }
    }
}

/// Every option the search may pick from. Each grid costs `⌈log2 N⌉` bits
/// in every certificate whether or not all of its values are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub intrinsic_dim: Vec<usize>,
    pub rank: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub alpha: Vec<f64>,
    pub levels: Vec<usize>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            intrinsic_dim: vec![1000, 2500, 5000],
            rank: vec![1, 4],
            learning_rate: vec![5e-4, 2e-3, 5e-3],
            alpha: vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            levels: vec![11, 17],
        }
    }
}

/// One trained configuration; every level count is quantized from it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub intrinsic_dim: usize,
    pub rank: usize,
    pub learning_rate: f64,
}

impl GridPoint {
    pub fn tag(&self) -> String {
        format!("d{}_r{}_lr{:e}", self.intrinsic_dim, self.rank, self.learning_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QatOptimizer {
    /// Plain steps `x ← x − ρ·∇x` on coordinates and levels.
    Sgd,
    /// The same gradients through moment estimates.
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total steps including the quantization-aware tail.
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub qat_fraction: f64,
    pub qat_lr: f64,
    pub qat_optimizer: QatOptimizer,
    pub lora_alpha: f64,
    pub adamw: AdamWConfig,
    pub log_every: usize,
    /// Steps between resumable snapshots; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 32,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            qat_fraction: 0.1,
            qat_lr: 1e-4,
            qat_optimizer: QatOptimizer::Adamw,
            lora_alpha: 32.0,
            adamw: AdamWConfig::default(),
            log_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn qat_steps(&self) -> usize {
        (self.steps as f64 * self.qat_fraction).round() as usize
    }

    pub fn main_steps(&self) -> usize {
        self.steps - self.qat_steps()
    }
}

/// Layer count, head count and width of one scaling-sweep model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub permute: bool,
    pub sequence_level: bool,
    /// Chunk length in sequence mode; the context length when unset.
    pub sequence_length: Option<usize>,
    pub scaling: Vec<ModelShape>,
    /// Training steps for experiment runs; the main recipe's when unset.
    pub steps: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            permute: true,
            sequence_level: true,
            sequence_length: None,
            scaling: vec![
                ModelShape { n_layers: 4, n_heads: 4, embed_dim: 32 },
                ModelShape { n_layers: 4, n_heads: 4, embed_dim: 64 },
                ModelShape { n_layers: 4, n_heads: 4, embed_dim: 128 },
            ],
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Job seed: the projector and the batch streams derive from it.
    pub seed: u64,
    pub deterministic: bool,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub grids: Grids,
    /// Subset of the grid that is trained; the full product when unset.
    pub points: Option<Vec<GridPoint>>,
    pub train: TrainConfig,
    pub sample: SampleSpec,
    pub confidence: f64,
    pub window_stride: usize,
    pub experiments: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            grids: Grids::default(),
            points: None,
            train: TrainConfig::default(),
            sample: SampleSpec::default(),
            confidence: crate::bounds::DEFAULT_CONFIDENCE,
            window_stride: crate::risk::DEFAULT_STRIDE,
            experiments: ExperimentConfig::default(),
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with every default filled in.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let g = &self.grids;
        for (name, empty) in [
            ("intrinsic_dim", g.intrinsic_dim.is_empty()),
            ("rank", g.rank.is_empty()),
            ("learning_rate", g.learning_rate.is_empty()),
            ("alpha", g.alpha.is_empty()),
            ("levels", g.levels.is_empty()),
        ] {
            if empty {
                return Err(Error::EmptyGrid(name));
            }
        }
        for &a in &g.alpha {
            crate::risk::check_alpha(a)?;
        }
        ensure(g.levels.iter().all(|&c| c >= 1), || "level counts must be positive".into())?;
        for p in self.points() {
            self.grid_choices(&p, g.levels[0], g.alpha[0])?;
        }
        let t = &self.train;
        ensure(t.batch_size >= 1, || "batch size must be positive".into())?;
        ensure((0.0..=1.0).contains(&t.qat_fraction), || "qat_fraction outside [0, 1]".into())?;
        ensure(self.confidence > 0.0 && self.confidence < 1.0, || "confidence outside (0, 1)".into())?;
        ensure(self.window_stride >= 1 && self.window_stride <= self.model.context_length, || {
            format!("window stride {} outside 1..={}", self.window_stride, self.model.context_length)
        })?;
        ensure(self.sample.n >= 1, || "subsample size must be positive".into())?;
        Ok(())
    }

    /// Trained points in declaration order.
    pub fn points(&self) -> Vec<GridPoint> {
        if let Some(p) = &self.points {
            return p.clone();
        }
        let g = &self.grids;
        let mut out = Vec::new();
        for &intrinsic_dim in &g.intrinsic_dim {
            for &rank in &g.rank {
                for &learning_rate in &g.learning_rate {
                    out.push(GridPoint { intrinsic_dim, rank, learning_rate });
                }
            }
        }
        out
    }

    /// The grid choices a certificate pays for; fails when any value was not
    /// declared.
    pub fn grid_choices(&self, p: &GridPoint, levels: usize, alpha: f64) -> Result<Vec<GridChoice>> {
        let g = &self.grids;
        let choices = vec![
            GridChoice::new("intrinsic_dim", g.intrinsic_dim.iter().map(|&v| v as f64).collect(), p.intrinsic_dim as f64),
            GridChoice::new("rank", g.rank.iter().map(|&v| v as f64).collect(), p.rank as f64),
            GridChoice::new("learning_rate", g.learning_rate.clone(), p.learning_rate),
            GridChoice::new("alpha", g.alpha.clone(), alpha),
            GridChoice::new("levels", g.levels.iter().map(|&v| v as f64).collect(), levels as f64),
        ];
        for c in &choices {
            c.index()?;
        }
        Ok(choices)
    }

    pub fn corpus_dir(&self, out_dir: &Path) -> PathBuf {
        self.corpus.dir.clone().unwrap_or_else(|| out_dir.join("corpus"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.points().len(), 18);
        assert_eq!(c.train.qat_steps(), 500);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"steps": 10}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn undeclared_point_rejected() {
        let mut c = RunConfig::default();
        c.points = Some(vec![GridPoint { intrinsic_dim: 1234, rank: 4, learning_rate: 5e-3 }]);
        assert!(matches!(c.validate(), Err(Error::NotInGrid { .. })));
    }

    #[test]
    fn full_grid_costs() {
        let c = RunConfig::default();
        let p = c.points()[0];
        let bits = crate::codec::hyperparam_bits(&c.grid_choices(&p, 11, 0.1).unwrap()).unwrap();
        assert_eq!(bits, 2 + 1 + 2 + 3 + 1);
    }
}

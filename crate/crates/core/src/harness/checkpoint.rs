//! `.ckpt` files: trained coordinates plus what is needed to resume.
//!
//! Layout: `b"SLCK"`, `u32` version, `u32` header length, JSON header,
//! then each section listed in the header as raw little-endian values, and
//! a trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::sublora::SubLoraConfig;

pub const CKPT_MAGIC: &[u8; 4] = b"SLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub model: ModelConfig,
    pub sublora: SubLoraConfig,
    /// Optimizer steps applied to `w`.
    pub step: usize,
    /// Present once `w` holds quantized values.
    pub levels: Option<Vec<f32>>,
    pub adam_step: Option<u64>,
    pub sections: Vec<Section>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub sublora: SubLoraConfig,
    pub step: usize,
    pub w: Vec<f32>,
    pub levels: Option<Vec<f32>>,
    /// First and second moments with their step count.
    pub adam: Option<(Vec<f64>, Vec<f64>, u64)>,
    pub provenance: BTreeMap<String, String>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt { what: "checkpoint", detail: detail.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = vec![Section { name: "w".into(), dtype: Dtype::F32, len: self.w.len() }];
        if let Some((m, v, _)) = &self.adam {
            sections.push(Section { name: "adam_m".into(), dtype: Dtype::F64, len: m.len() });
            sections.push(Section { name: "adam_v".into(), dtype: Dtype::F64, len: v.len() });
        }
        let header = CheckpointHeader {
            architecture: self.model.architecture_tag(),
            model: self.model.clone(),
            sublora: self.sublora.clone(),
            step: self.step,
            levels: self.levels.clone(),
            adam_step: self.adam.as_ref().map(|a| a.2),
            sections,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        self.w.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        if let Some((m, v, _)) = &self.adam {
            m.iter().chain(v).for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 + 32 || &buf[..4] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let json = body.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.architecture != header.model.architecture_tag() {
            return Err(corrupt("architecture tag does not match model config"));
        }
        let mut pos = 12 + hlen;
        let mut f32s = BTreeMap::new();
        let mut f64s = BTreeMap::new();
        for s in &header.sections {
            let n = s.len.checked_mul(s.dtype.width()).ok_or_else(|| corrupt("section size"))?;
            let bytes = body.get(pos..pos + n).ok_or_else(|| corrupt(format!("truncated section {}", s.name)))?;
            pos += n;
            match s.dtype {
                Dtype::F32 => {
                    f32s.insert(s.name.clone(), bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
                }
                Dtype::F64 => {
                    f64s.insert(s.name.clone(), bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
                }
            }
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let w = f32s.remove("w").ok_or_else(|| corrupt("missing w"))?;
        if w.len() != header.sublora.intrinsic_dim {
            return Err(corrupt(format!("w has {} coordinates, config says {}", w.len(), header.sublora.intrinsic_dim)));
        }
        let adam = match (f64s.remove("adam_m"), f64s.remove("adam_v"), header.adam_step) {
            (Some(m), Some(v), Some(t)) => Some((m, v, t)),
            (None, None, None) => None,
            _ => return Err(corrupt("incomplete optimizer state")),
        };
        Ok(Checkpoint {
            model: header.model,
            sublora: header.sublora,
            step: header.step,
            w,
            levels: header.levels,
            adam,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }

    /// Levels and assignments; fails unless every coordinate sits exactly
    /// on a level.
    pub fn quantized(&self) -> Result<(Vec<f32>, Vec<u32>)> {
        let levels = self.levels.clone().ok_or(Error::MissingQuantization)?;
        let mut q = Vec::with_capacity(self.w.len());
        for &x in &self.w {
            let j = levels
                .iter()
                .position(|&c| c.to_bits() == x.to_bits())
                .ok_or_else(|| corrupt(format!("coordinate {x} is not a level")))?;
            q.push(j as u32);
        }
        Ok((levels, q))
    }
}

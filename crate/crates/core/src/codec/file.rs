//! The `.hyp` compressed-hypothesis file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SLHY"
//! 4       4     format version, u32 LE
//! 8       4     header length H, u32 LE
//! 12      H     header, UTF-8 JSON (HypothesisHeader)
//! 12+H    8     payload length P in bytes, u64 LE
//! 20+H    P     arithmetic-coded assignments, MSB-first
//! 20+H+P  32    SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Bitstream, CompressedHypothesis, GridChoice};
use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::sublora::SubLoraConfig;

pub const HYP_MAGIC: &[u8; 4] = b"SLHY";
pub const HYP_VERSION: u32 = 1;

/// Everything besides the payload needed to rebuild `h` exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisHeader {
    pub architecture: String,
    pub model: ModelConfig,
    pub sublora: SubLoraConfig,
    /// Level values; each is an exact 32-bit float.
    pub levels: Vec<f32>,
    pub counts: Vec<u64>,
    pub grids: Vec<GridChoice>,
    pub payload_bits: u64,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

pub fn write_hypothesis(
    path: &Path,
    model: &ModelConfig,
    sublora: &SubLoraConfig,
    h: &CompressedHypothesis,
    provenance: BTreeMap<String, String>,
) -> Result<()> {
    let header = HypothesisHeader {
        architecture: model.architecture_tag(),
        model: model.clone(),
        sublora: sublora.clone(),
        levels: h.levels.clone(),
        counts: h.counts.clone(),
        grids: h.grids.clone(),
        payload_bits: h.payload.bit_len,
        provenance,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(64 + json.len() + h.payload.bytes.len());
    buf.extend_from_slice(HYP_MAGIC);
    buf.extend_from_slice(&HYP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(h.payload.bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&h.payload.bytes);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).at(path)
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt { what: "hypothesis file", detail: detail.into() }
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| corrupt("truncated"))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

/// Reads and verifies a `.hyp` file, recomputing `C(h)` from its contents.
pub fn read_hypothesis(path: &Path) -> Result<(HypothesisHeader, CompressedHypothesis)> {
    let buf = std::fs::read(path).at(path)?;
    if buf.len() < 32 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let mut pos = 0;
    if take(body, &mut pos, 4)? != HYP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(body, &mut pos, 4)?.try_into().unwrap());
    if version != HYP_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(body, &mut pos, 4)?.try_into().unwrap()) as usize;
    let header: HypothesisHeader = serde_json::from_slice(take(body, &mut pos, hlen)?)?;
    let plen = u64::from_le_bytes(take(body, &mut pos, 8)?.try_into().unwrap()) as usize;
    let payload = Bitstream::from_parts(take(body, &mut pos, plen)?.to_vec(), header.payload_bits)?;
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    if header.architecture != header.model.architecture_tag() {
        return Err(corrupt("architecture tag does not match model config"));
    }
    let size = super::total_size(payload.bit_len, header.levels.len(), &header.counts, &header.grids)?;
    let prior_nats = super::prior_complexity(size.total_bits)?;
    let h = CompressedHypothesis {
        payload,
        levels: header.levels.clone(),
        counts: header.counts.clone(),
        grids: header.grids.clone(),
        size,
        prior_nats,
    };
    Ok((header, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.hyp");
        let a: Vec<u32> = (0..777).map(|i| (i % 5 == 0) as u32 + (i % 11 == 0) as u32).collect();
        let h = CompressedHypothesis::compress(&[-0.1, 0.0, 0.1], &a, vec![GridChoice::new("r", vec![1.0, 4.0], 4.0)]).unwrap();
        let model = ModelConfig::default();
        let sub = SubLoraConfig::default();
        write_hypothesis(&path, &model, &sub, &h, BTreeMap::new()).unwrap();
        let (hdr, back) = read_hypothesis(&path).unwrap();
        assert_eq!(back, h);
        assert_eq!(hdr.model, model);
        assert_eq!(back.assignments().unwrap(), a);

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_hypothesis(&path), Err(Error::Corrupt { .. })));
    }
}

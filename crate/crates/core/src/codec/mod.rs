//! Compressed size of a hypothesis and its prior complexity.
//!
//! `C(h)` counts every bit needed to reconstruct the quantized coordinates
//! from the fixed architecture and seeds: the arithmetic-coded payload, the
//! levels, the counts table, and the grid choices made while searching.

pub mod arith;
mod file;

pub use arith::{decode, empirical_entropy, encode, encode_with, histogram, Bitstream};
pub use file::{read_hypothesis, write_hypothesis, HypothesisHeader, HYP_MAGIC, HYP_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levels are stored as 32-bit floats.
pub const LEVEL_BITS: u64 = 32;

/// `⌈log2 n⌉` for `n ≥ 1`.
pub fn ceil_log2(n: u64) -> u64 {
    assert!(n >= 1, "ceil_log2 of zero");
    64 - (n - 1).leading_zeros() as u64
}

/// A searched hyperparameter: its predeclared options and the value used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub name: String,
    pub options: Vec<f64>,
    pub value: f64,
}

impl GridChoice {
    pub fn new(name: impl Into<String>, options: Vec<f64>, value: f64) -> Self {
        GridChoice { name: name.into(), options, value }
    }

    /// Index of the chosen value, or an error if it was never declared.
    pub fn index(&self) -> Result<usize> {
        if self.options.is_empty() {
            return Err(Error::Config(format!("grid `{}` has no options", self.name)));
        }
        self.options
            .iter()
            .position(|&o| o == self.value)
            .ok_or_else(|| Error::NotInGrid { name: self.name.clone(), value: self.value.to_string() })
    }

    pub fn bits(&self) -> Result<u64> {
        self.index()?;
        Ok(ceil_log2(self.options.len() as u64))
    }
}

pub fn hyperparam_bits(grids: &[GridChoice]) -> Result<u64> {
    grids.iter().map(GridChoice::bits).sum()
}

/// Itemized `C(h)` in bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBreakdown {
    pub payload_bits: u64,
    pub levels_bits: u64,
    pub counts_bits: u64,
    pub hyperparam_bits: u64,
    pub total_bits: u64,
}

impl SizeBreakdown {
    pub fn header_bits(&self) -> u64 {
        self.levels_bits + self.counts_bits
    }
}

/// `C(h) = payload + 32·C + C·⌈log2(n+1)⌉ + Σ⌈log2 N_j⌉` where `n` is the
/// number of coded symbols.
pub fn total_size(payload_bits: u64, levels: usize, counts: &[u64], grids: &[GridChoice]) -> Result<SizeBreakdown> {
    if counts.len() != levels {
        return Err(Error::DimensionMismatch { what: "counts table", expected: levels, got: counts.len() });
    }
    let n: u64 = counts.iter().sum();
    let levels_bits = LEVEL_BITS * levels as u64;
    let counts_bits = levels as u64 * ceil_log2(n + 1);
    let hyperparam_bits = hyperparam_bits(grids)?;
    Ok(SizeBreakdown {
        payload_bits,
        levels_bits,
        counts_bits,
        hyperparam_bits,
        total_bits: payload_bits + levels_bits + counts_bits + hyperparam_bits,
    })
}

/// `log 1/P(h) = C(h)·ln 2 + 2·ln C(h)`, in nats.
pub fn prior_complexity(c_h: u64) -> Result<f64> {
    if c_h < 2 {
        return Err(Error::Config(format!("compressed size {c_h} below 2 bits")));
    }
    let c = c_h as f64;
    Ok(c * std::f64::consts::LN_2 + 2.0 * c.ln())
}

/// A quantized hypothesis reduced to its code.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedHypothesis {
    pub payload: Bitstream,
    pub levels: Vec<f32>,
    pub counts: Vec<u64>,
    pub grids: Vec<GridChoice>,
    pub size: SizeBreakdown,
    pub prior_nats: f64,
}

impl CompressedHypothesis {
    pub fn compress(levels: &[f32], assignments: &[u32], grids: Vec<GridChoice>) -> Result<Self> {
        let (payload, counts) = encode(assignments, levels.len())?;
        let size = total_size(payload.bit_len, levels.len(), &counts, &grids)?;
        let prior_nats = prior_complexity(size.total_bits)?;
        Ok(CompressedHypothesis { payload, levels: levels.to_vec(), counts, grids, size, prior_nats })
    }

    pub fn num_symbols(&self) -> usize {
        self.counts.iter().sum::<u64>() as usize
    }

    pub fn assignments(&self) -> Result<Vec<u32>> {
        decode(&self.payload, &self.counts, self.num_symbols())
    }

    /// Quantized coordinates `ŵ`.
    pub fn weights(&self) -> Result<Vec<f32>> {
        Ok(self.assignments()?.into_iter().map(|q| self.levels[q as usize]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        let cases = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (1 << 20, 20)];
        for (n, want) in cases {
            assert_eq!(ceil_log2(n), want, "{n}");
        }
    }

    #[test]
    fn grid_costs() {
        let alpha = GridChoice::new("alpha", vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0], 0.1);
        assert_eq!(alpha.bits().unwrap(), 3);
        assert_eq!(hyperparam_bits(&[]).unwrap(), 0);
        let off = GridChoice::new("alpha", vec![0.1, 0.2], 0.15);
        assert!(matches!(off.bits(), Err(Error::NotInGrid { .. })));
    }

    #[test]
    fn reference_grid_is_ten_bits() {
        let grids = [
            GridChoice::new("d", vec![5e3, 1e4, 2.5e4, 5e4, 1e5, 2e5], 5e4),
            GridChoice::new("r", vec![1.0, 4.0], 4.0),
            GridChoice::new("lr", vec![2e-4, 5e-3, 5e-5], 5e-3),
            GridChoice::new("alpha", vec![1e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 2.5e-1, 5e-1], 1e-1),
            GridChoice::new("levels", vec![11.0, 17.0], 11.0),
        ];
        assert_eq!(hyperparam_bits(&grids).unwrap(), 10);
    }

    #[test]
    fn size_accounting() {
        let s = total_size(1000, 11, &[10; 11], &[GridChoice::new("x", vec![1.0, 2.0, 3.0], 2.0)]).unwrap();
        assert_eq!(s.levels_bits, 352);
        assert_eq!(s.counts_bits, 11 * 7);
        assert_eq!(s.hyperparam_bits, 2);
        assert_eq!(s.total_bits, 1000 + 352 + 77 + 2);
    }

    #[test]
    fn prior_values() {
        assert!((prior_complexity(2).unwrap() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(prior_complexity(1).is_err());
        let mut prev = prior_complexity(2).unwrap();
        for c in 3..2000 {
            let p = prior_complexity(c).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn compress_roundtrip() {
        let levels = [-0.5f32, 0.0, 0.25];
        let a: Vec<u32> = (0..500).map(|i| (i * i % 7 % 3) as u32).collect();
        let h = CompressedHypothesis::compress(&levels, &a, vec![]).unwrap();
        assert_eq!(h.assignments().unwrap(), a);
        assert_eq!(h.size.total_bits, h.payload.bit_len + 96 + 3 * 9);
    }
}

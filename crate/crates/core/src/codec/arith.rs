//! Static binary arithmetic coder over a fixed frequency table, 32-bit
//! integer state with carry-free pending-bit renormalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BITS: u32 = 32;
const TOP: u64 = (1 << BITS) - 1;
const HALF: u64 = 1 << (BITS - 1);
const QUARTER: u64 = 1 << (BITS - 2);
const THREE_QUARTERS: u64 = 3 * QUARTER;

/// Largest total count the coder accepts; keeps every interval non-empty.
pub const MAX_TOTAL: u64 = QUARTER;

/// A bit string packed MSB-first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

impl Bitstream {
    pub fn push(&mut self, bit: bool) {
        let i = self.bit_len as usize;
        if i.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[i / 8] |= 0x80 >> (i % 8);
        }
        self.bit_len += 1;
    }

    /// Bit `i`; reads past the end are zero.
    pub fn get(&self, i: u64) -> bool {
        i < self.bit_len && self.bytes[(i / 8) as usize] & (0x80 >> (i % 8)) != 0
    }

    pub fn from_parts(bytes: Vec<u8>, bit_len: u64) -> Result<Self> {
        if bytes.len() as u64 != bit_len.div_ceil(8) {
            return Err(Error::Corrupt { what: "bitstream", detail: format!("{} bytes for {bit_len} bits", bytes.len()) });
        }
        Ok(Bitstream { bytes, bit_len })
    }
}

/// Symbol histogram of `symbols` over an alphabet of size `alphabet`.
pub fn histogram(symbols: &[u32], alphabet: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; alphabet];
    for &s in symbols {
        *counts
            .get_mut(s as usize)
            .ok_or_else(|| Error::Config(format!("symbol {s} outside alphabet of {alphabet}")))? += 1;
    }
    Ok(counts)
}

fn cumulative(counts: &[u64]) -> Result<Vec<u64>> {
    let mut cum = Vec::with_capacity(counts.len() + 1);
    cum.push(0u64);
    for &c in counts {
        cum.push(cum.last().unwrap() + c);
    }
    if *cum.last().unwrap() > MAX_TOTAL {
        return Err(Error::Config(format!("total count {} exceeds coder limit {MAX_TOTAL}", cum.last().unwrap())));
    }
    Ok(cum)
}

struct Writer {
    out: Bitstream,
    pending: u64,
}

impl Writer {
    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }
}

/// Two-pass static coding: histogram first, then code against it.
/// Returns the payload and the counts needed to decode it.
pub fn encode(symbols: &[u32], alphabet: usize) -> Result<(Bitstream, Vec<u64>)> {
    let counts = histogram(symbols, alphabet)?;
    Ok((encode_with(symbols, &counts)?, counts))
}

pub fn encode_with(symbols: &[u32], counts: &[u64]) -> Result<Bitstream> {
    let cum = cumulative(counts)?;
    let total = *cum.last().unwrap();
    let mut w = Writer { out: Bitstream::default(), pending: 0 };
    if symbols.is_empty() {
        return Ok(w.out);
    }
    let (mut low, mut high) = (0u64, TOP);
    for &s in symbols {
        let s = s as usize;
        if s >= counts.len() || counts[s] == 0 {
            return Err(Error::Config(format!("symbol {s} has zero count")));
        }
        let range = high - low + 1;
        high = low + range * cum[s + 1] / total - 1;
        low += range * cum[s] / total;
        loop {
            if high < HALF {
                w.emit(false);
            } else if low >= HALF {
                w.emit(true);
                low -= HALF;
                high -= HALF;
            } else if low >= QUARTER && high < THREE_QUARTERS {
                w.pending += 1;
                low -= QUARTER;
                high -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
        }
    }
    // Two bits pin a point inside [low, high] when the tail reads as zeros.
    w.pending += 1;
    w.emit(low >= QUARTER);
    Ok(w.out)
}

pub fn decode(bits: &Bitstream, counts: &[u64], len: usize) -> Result<Vec<u32>> {
    let cum = cumulative(counts)?;
    let total = *cum.last().unwrap();
    if len == 0 {
        return Ok(Vec::new());
    }
    if total == 0 {
        return Err(Error::Corrupt { what: "counts table", detail: "all counts zero".into() });
    }
    let mut pos = 0u64;
    let mut value = 0u64;
    for _ in 0..BITS {
        value = (value << 1) | bits.get(pos) as u64;
        pos += 1;
    }
    let (mut low, mut high) = (0u64, TOP);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let range = high - low + 1;
        let target = ((value - low + 1) * total - 1) / range;
        // Last bin whose cumulative start is ≤ target.
        let s = cum.partition_point(|&c| c <= target) - 1;
        if s >= counts.len() {
            return Err(Error::Corrupt { what: "payload", detail: "decoded past alphabet".into() });
        }
        out.push(s as u32);
        high = low + range * cum[s + 1] / total - 1;
        low += range * cum[s] / total;
        loop {
            if high < HALF {
            } else if low >= HALF {
                low -= HALF;
                high -= HALF;
                value -= HALF;
            } else if low >= QUARTER && high < THREE_QUARTERS {
                low -= QUARTER;
                high -= QUARTER;
                value -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
            value = (value << 1) | bits.get(pos) as u64;
            pos += 1;
        }
    }
    Ok(out)
}

/// Empirical entropy in bits per symbol.
pub fn empirical_entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

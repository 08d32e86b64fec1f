//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! keyed by a job seed plus a stream label, so sub-seeds never collide and a
//! single integer reproduces a whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms and toolchains.
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Derive a child seed from a parent seed, a label and an index.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ label_hash(label)).wrapping_add(index))
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, 0))
}

pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, index))
}

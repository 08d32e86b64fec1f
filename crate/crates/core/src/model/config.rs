use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Maximum number of input positions `L`.
    pub context_length: usize,
    /// Output vocabulary size `V`. The input vocabulary has one extra id for
    /// the beginning-of-document marker.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_layers: 4, n_heads: 4, embed_dim: 128, context_length: 256, vocab_size: 256, seed: 0 }
    }
}

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 || self.context_length == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn input_vocab(&self) -> usize {
        self.vocab_size + 1
    }

    /// Token id fed at position 0 of every document.
    pub fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Canonical architecture string `A`: every shape and initialization
    /// choice needed to rebuild the untrained network from its seed.
    pub fn architecture_tag(&self) -> String {
        format!(
            "gpt-prenorm/v1;layers={};heads={};embed={};ctx={};vocab={};mlp={}x;act=gelu-tanh;ln-eps=1e-5;\
             bos=vocab;head=untied-nobias;init=normal({INIT_STD}),resid-proj=normal({INIT_STD}/sqrt(2*layers)),\
             bias=0,ln-gain=1;seed={}",
            self.n_layers, self.n_heads, self.embed_dim, self.context_length, self.vocab_size, MLP_RATIO, self.seed
        )
    }
}

//! Non-vacuous generalization bounds for small language models trained in a
//! compressed subspace.
//!
//! The pipeline: tokenize a corpus ([`corpus`]), train a transformer
//! ([`model`]) through a low-rank plus random-subspace reparameterization
//! ([`sublora`]), quantize the trained coordinates ([`quantizer`]), encode
//! them with an arithmetic coder ([`codec`]), evaluate smoothed risk
//! ([`risk`]) and turn everything into a certificate ([`bounds`]).
//! [`harness`] runs the whole thing from a config.

pub mod error;
pub mod linalg;
pub mod rng;

pub mod corpus;
pub mod model;
pub mod sublora;
pub mod quantizer;
pub mod codec;
pub mod risk;
pub mod bounds;
pub mod harness;

pub use error::{Error, Result};

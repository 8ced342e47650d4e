//! Desk-scale quantization lab for lossless KV-cache prefixes.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithm:
//! dense numerics, group-wise quantization, a toy LLaMA-shaped decoder with
//! KV-cache decoding, pivot-token statistics, lossless prefix generation,
//! prefix calibration with analytic gradients, and an attention-error bound
//! verifier. File formats, corpora and the command line live in the
//! companion `intactkv-lab` crate.
//!
//! All transcendental functions go through [`libm`] so results are
//! bit-reproducible across platforms.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bound;
pub mod calibration;
pub mod error;
pub mod experiment;
pub mod intactkv;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pivot;
pub mod quantizer;
pub mod recipe;
pub mod rng;

pub use error::{Error, Result};
pub use intactkv::{IntactKv, Provenance};
pub use model::{ForwardTrace, KvCache, ModelConfig, ModelWeights};
pub use numcore::{Matrix, NormKind};
pub use quantizer::{QuantConfig, QuantizedTensor};

//! Toy LLaMA-shaped decoder: pre-norm RMSNorm, rotary multi-head causal
//! attention, SwiGLU feed-forward, no biases.
//!
//! Weights use the `x · W` convention, so every projection is stored as
//! `(in × out)`.

mod cache;
mod forward;
mod weights;

pub use cache::KvCache;
pub use forward::{decode_step, forward, forward_with, ForwardTrace, KvQuant, RunOptions};
pub(crate) use forward::{run, Tape};
pub use weights::{init_random, inject_attention_sink, LayerWeights, ModelWeights};

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
    pub rmsnorm_eps: f64,
    pub use_rope: bool,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads.
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 172,
            vocab_size: 256,
            max_seq: 128,
            rope_theta: 10000.0,
            rmsnorm_eps: 1e-6,
            use_rope: true,
        }
    }
}

impl ModelConfig {
    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.use_rope && self.head_dim() % 2 != 0 {
            return Err(Error::Input(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Input("rope_theta must be positive".into()));
        }
        if !(self.rmsnorm_eps.is_finite() && self.rmsnorm_eps > 0.0) {
            return Err(Error::Input("rmsnorm_eps must be positive".into()));
        }
        Ok(())
    }
}

//! Canonical desk-scale setups shared by tests, the acceptance suite and
//! the command line.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{decode_step, forward, init_random, inject_attention_sink, ModelConfig, ModelWeights};
use crate::quantizer::{quantize_model_weights, QuantConfig};
use crate::rng::Rng;

pub const CANONICAL_SEED: u64 = 42;
/// Token id used as `[BOS]` and as the injected sink.
pub const BOS: u32 = 0;
pub const SINK_CHANNELS: [usize; 4] = [7, 21, 38, 52];
pub const SINK_SCALE: f64 = 1e3;
/// Seed of the shared "system prompt" that opens every synthetic sequence.
pub const PROMPT_SEED: u64 = 0x5EED_0F_B05;

pub fn canonical_config() -> ModelConfig {
    ModelConfig::default()
}

/// Seed-42 model without a sink.
pub fn canonical_model() -> ModelWeights {
    init_random(&canonical_config(), CANONICAL_SEED).expect("canonical config is valid")
}

/// Seed-42 model with `[BOS]` scaled by 1e3 on [`SINK_CHANNELS`].
pub fn canonical_sink_model() -> ModelWeights {
    inject_attention_sink(&canonical_model(), BOS, &SINK_CHANNELS, SINK_SCALE).expect("sink recipe is valid")
}

/// The canonical sink model with 3-bit, group-16 round-to-nearest weights.
pub fn canonical_quantized(bits: u32, group_size: usize) -> Result<ModelWeights> {
    quantize_model_weights(&canonical_sink_model(), &QuantConfig::new(bits, group_size)?)
}

/// One layer, one head, head dim 4.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 1,
        d_ff: 8,
        vocab_size: 16,
        max_seq: 32,
        ..ModelConfig::default()
    }
}

/// `[BOS]` followed by `len − 1` tokens from a fixed stream.
pub fn system_prompt(len: usize, vocab_size: usize) -> Vec<u32> {
    let mut rng = Rng::new(PROMPT_SEED);
    let mut out = Vec::with_capacity(len);
    if len > 0 {
        out.push(BOS);
    }
    while out.len() < len {
        out.push(1 + rng.below(vocab_size - 1) as u32);
    }
    out
}

/// Sequences of `seq_len` tokens: the shared [`system_prompt`] of
/// `prompt_len` tokens, then a continuation sampled at temperature 1 from
/// `teacher`.
pub fn synthetic_corpus(
    teacher: &ModelWeights,
    n_sequences: usize,
    seq_len: usize,
    prompt_len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    let cfg = &teacher.config;
    if prompt_len == 0 || prompt_len >= seq_len || seq_len > cfg.max_seq {
        return Err(Error::Input(alloc::format!(
            "need 1 <= prompt_len < seq_len <= max_seq (got {prompt_len}, {seq_len}, {})",
            cfg.max_seq
        )));
    }
    let prompt = system_prompt(prompt_len, cfg.vocab_size);
    let trace = forward(teacher, &prompt)?;
    let mut rng = Rng::new(seed);
    let mut corpus = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut tokens = prompt.clone();
        let mut cache = trace.cache.clone();
        let mut logits = trace.logits.row(prompt_len - 1).to_vec();
        while tokens.len() < seq_len {
            let t = sample(&logits, &mut rng);
            tokens.push(t);
            if tokens.len() < seq_len {
                let (next, c) = decode_step(teacher, &cache, t)?;
                logits = next;
                cache = c;
            }
        }
        corpus.push(tokens);
    }
    Ok(corpus)
}

fn sample(logits: &[f64], rng: &mut Rng) -> u32 {
    let mut p = logits.to_vec();
    crate::numcore::softmax_in_place(&mut p);
    let u = rng.unit();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

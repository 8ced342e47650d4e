//! Lossless KV-cache prefixes.
//!
//! An [`IntactKv`] holds the keys and values of the first `m` positions as
//! computed by the full-precision model. A quantized model loads it as the
//! head of its cache and decodes the remaining tokens from position `m`.
//! Keys are stored post-rotary, so a prefix is only valid at positions
//! `0..m`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{forward, forward_with, ForwardTrace, KvCache, KvQuant, ModelWeights, RunOptions};
use crate::quantizer::{quantize_kv_dynamic, QuantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Lossless,
    Calibrated,
    Quantized,
}

impl Provenance {
    pub fn as_byte(self) -> u8 {
        match self {
            Self::Lossless => 0,
            Self::Calibrated => 1,
            Self::Quantized => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Lossless),
            1 => Some(Self::Calibrated),
            2 => Some(Self::Quantized),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lossless => "lossless",
            Self::Calibrated => "calibrated",
            Self::Quantized => "quantized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntactKv {
    prefix_tokens: Vec<u32>,
    provenance: Provenance,
    cache: KvCache,
}

impl IntactKv {
    /// Runs the full-precision model over `prefix_tokens` and keeps its cache.
    pub fn generate(fp_weights: &ModelWeights, prefix_tokens: &[u32]) -> Result<Self> {
        if prefix_tokens.is_empty() {
            return Err(Error::Input("an IntactKV prefix needs at least one token".into()));
        }
        let trace = forward(fp_weights, prefix_tokens)?;
        Ok(Self {
            prefix_tokens: prefix_tokens.to_vec(),
            provenance: Provenance::Lossless,
            cache: trace.cache,
        })
    }

    pub fn from_parts(prefix_tokens: Vec<u32>, provenance: Provenance, cache: KvCache) -> Result<Self> {
        if prefix_tokens.is_empty() {
            return Err(Error::Input("an IntactKV prefix needs at least one token".into()));
        }
        if cache.seq_len() != prefix_tokens.len() {
            return Err(Error::Input(format!(
                "{} prefix tokens but the cache holds {} positions",
                prefix_tokens.len(),
                cache.seq_len()
            )));
        }
        Ok(Self {
            prefix_tokens,
            provenance,
            cache,
        })
    }

    #[inline]
    pub fn prefix_len(&self) -> usize {
        self.prefix_tokens.len()
    }

    pub fn prefix_tokens(&self) -> &[u32] {
        &self.prefix_tokens
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Number of stored reals: `2 · L · H · m · d`.
    pub fn element_count(&self) -> usize {
        2 * self.cache.n_layers() * self.cache.n_heads() * self.prefix_len() * self.cache.head_dim()
    }

    /// Storage as a fraction of the model's parameter count.
    pub fn storage_ratio(&self, weights: &ModelWeights) -> f64 {
        self.element_count() as f64 / weights.parameter_count() as f64
    }

    /// All prefix entries, layer-major, keys before values within a head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.element_count());
        for (k, v) in self.cache.keys_all().iter().zip(self.cache.values_all()) {
            out.extend_from_slice(k.data());
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`IntactKv::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.element_count() {
            return Err(Error::Input(format!(
                "{} values for a prefix of {} entries",
                flat.len(),
                self.element_count()
            )));
        }
        let per = self.prefix_len() * self.cache.head_dim();
        let mut chunks = flat.chunks(per);
        for layer in 0..self.cache.n_layers() {
            for head in 0..self.cache.n_heads() {
                let (k, v) = self.cache.head_mut(layer, head);
                k.data_mut().copy_from_slice(chunks.next().expect("length checked"));
                v.data_mut().copy_from_slice(chunks.next().expect("length checked"));
            }
        }
        Ok(())
    }
}

/// Loads `kv` as the cache head and processes `continuation` with
/// `q_weights` from absolute position `kv.prefix_len()`. The trace covers
/// the continuation positions; its cache includes the prefix rows verbatim.
pub fn attach_and_prefill(q_weights: &ModelWeights, kv: &IntactKv, continuation: &[u32]) -> Result<ForwardTrace> {
    attach_and_prefill_with(q_weights, kv, continuation, None)
}

/// [`attach_and_prefill`] with optional dynamic KV-cache quantization.
pub fn attach_and_prefill_with(
    q_weights: &ModelWeights,
    kv: &IntactKv,
    continuation: &[u32],
    kv_quant: Option<KvQuant>,
) -> Result<ForwardTrace> {
    forward_with(
        q_weights,
        continuation,
        RunOptions {
            prefix: Some(&kv.cache),
            kv_quant,
        },
    )
}

/// Per-head dynamic fake-quantization of the prefix itself (for settings
/// where the whole cache must be low-bit). `cfg.group_size` counts
/// positions per parameter block.
pub fn quantize_intactkv(kv: &IntactKv, cfg: &QuantConfig) -> Result<IntactKv> {
    Ok(IntactKv {
        prefix_tokens: kv.prefix_tokens.clone(),
        provenance: Provenance::Quantized,
        cache: quantize_kv_dynamic(&kv.cache, cfg, 0)?,
    })
}

/// Replaces positions `< prefix_len` of a quantized cache with the
/// full-precision prefix.
pub fn assemble_mixed_kv(kv_q: &KvCache, prefix: &IntactKv) -> Result<KvCache> {
    let m = prefix.prefix_len();
    let p = &prefix.cache;
    if kv_q.n_layers() != p.n_layers() || kv_q.n_heads() != p.n_heads() || kv_q.head_dim() != p.head_dim() {
        return Err(Error::Input("prefix and cache shapes differ".into()));
    }
    if m > kv_q.seq_len() {
        return Err(Error::Index {
            op: "assemble_mixed_kv",
            index: m,
            limit: kv_q.seq_len(),
        });
    }
    let mut out = kv_q.clone();
    let d = p.head_dim();
    for layer in 0..p.n_layers() {
        for head in 0..p.n_heads() {
            let (k, v) = out.head_mut(layer, head);
            k.data_mut()[..m * d].copy_from_slice(p.keys(layer, head).data());
            v.data_mut()[..m * d].copy_from_slice(p.values(layer, head).data());
        }
    }
    Ok(out)
}

use alloc::format;
use alloc::vec::Vec;

use super::{KvCache, ModelWeights};
use crate::error::{Error, Result};
use crate::numcore::{rmsnorm_row, rope_rotate_row, silu, softmax_in_place, Matrix};
use crate::quantizer::{fake_quant_group, quantize_kv_dynamic, QuantConfig};

/// Dynamic KV-cache quantization applied while decoding: every position at
/// or beyond `keep_prefix_fp` has its keys and values fake-quantized per
/// head as soon as they enter the cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvQuant {
    pub cfg: QuantConfig,
    pub keep_prefix_fp: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Cache occupying positions `[0, prefix.seq_len())`; the tokens are
    /// processed at absolute positions starting right after it.
    pub prefix: Option<&'a KvCache>,
    pub kv_quant: Option<KvQuant>,
}

/// Everything recorded by one forward pass over `n` new positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Absolute position of the first processed token.
    pub start: usize,
    /// Per layer: transformer-layer output, `n × d_model`.
    pub layer_outputs: Vec<Matrix>,
    /// Per layer: attention sub-layer output before the residual add.
    pub attn_outputs: Vec<Matrix>,
    /// Per `(layer, head)`, layer-major: `n × (start + n)` causal attention.
    pub attention: Vec<Matrix>,
    /// Cache after the pass (prefix included).
    pub cache: KvCache,
    /// `n × vocab_size`.
    pub logits: Matrix,
    n_heads: usize,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layer_outputs.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.attention[layer * self.n_heads + head]
    }
}

/// Activations kept for the backward pass of one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    pub x: Matrix,
    pub q: Matrix,
    pub x1: Matrix,
    pub g: Matrix,
    pub u: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub layers: Vec<LayerTape>,
}

pub fn forward(weights: &ModelWeights, tokens: &[u32]) -> Result<ForwardTrace> {
    Ok(run(weights, tokens, RunOptions::default(), false)?.0)
}

pub fn forward_with(weights: &ModelWeights, tokens: &[u32], opts: RunOptions<'_>) -> Result<ForwardTrace> {
    Ok(run(weights, tokens, opts, false)?.0)
}

/// Processes one token at absolute position `cache.seq_len()` and returns
/// its logits with the extended cache.
pub fn decode_step(weights: &ModelWeights, cache: &KvCache, token: u32) -> Result<(Vec<f64>, KvCache)> {
    let max_seq = weights.config.max_seq;
    if cache.seq_len() >= max_seq {
        return Err(Error::Capacity {
            needed: cache.seq_len() + 1,
            max_seq,
        });
    }
    let opts = RunOptions {
        prefix: Some(cache),
        kv_quant: None,
    };
    let (trace, _) = run(weights, &[token], opts, false)?;
    Ok((trace.logits.row(0).to_vec(), trace.cache))
}

fn rmsnorm_rows(x: &Matrix, gain: &[f64], eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        rmsnorm_row(x.row(r), gain, eps, out.row_mut(r));
    }
    out
}

pub(crate) fn run(
    weights: &ModelWeights,
    tokens: &[u32],
    opts: RunOptions<'_>,
    record: bool,
) -> Result<(ForwardTrace, Option<Tape>)> {
    let cfg = &weights.config;
    let (n_layers, n_heads, d) = (cfg.n_layers, cfg.n_heads, cfg.head_dim());
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut cache = match opts.prefix {
        Some(p) => {
            if !p.matches_config(cfg) {
                return Err(Error::Input("prefix cache does not match the model shape".into()));
            }
            p.clone()
        }
        None => KvCache::for_config(cfg),
    };
    let start = cache.seq_len();
    if start + n > cfg.max_seq {
        return Err(Error::Capacity {
            needed: start + n,
            max_seq: cfg.max_seq,
        });
    }
    if let Some(kq) = &opts.kv_quant {
        kq.cfg.validate()?;
        if kq.cfg.group_size != 1 {
            return Err(Error::Input(
                "KV quantization while decoding is per position; group_size must be 1".into(),
            ));
        }
        if start > 0 {
            cache = quantize_kv_dynamic(&cache, &kq.cfg, kq.keep_prefix_fp.min(start))?;
        }
    }

    let eps = cfg.rmsnorm_eps;
    let total = start + n;
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);

    let mut x = Matrix::zeros(n, cfg.d_model);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(weights.token_embedding.row(t as usize));
    }

    let mut layer_outputs = Vec::with_capacity(n_layers);
    let mut attn_outputs = Vec::with_capacity(n_layers);
    let mut attention = Vec::with_capacity(n_layers * n_heads);
    let mut tape = Vec::new();
    let mut krow = alloc::vec![0.0; d];
    let mut vrow = alloc::vec![0.0; d];

    for (l, lw) in weights.layers.iter().enumerate() {
        let a = rmsnorm_rows(&x, &lw.attn_norm, eps);
        let mut q = a.matmul(&lw.wq)?;
        let mut k = a.matmul(&lw.wk)?;
        let v = a.matmul(&lw.wv)?;
        if cfg.use_rope {
            for i in 0..n {
                for h in 0..n_heads {
                    let span = h * d..(h + 1) * d;
                    rope_rotate_row(&mut q.row_mut(i)[span.clone()], start + i, cfg.rope_theta, false);
                    rope_rotate_row(&mut k.row_mut(i)[span], start + i, cfg.rope_theta, false);
                }
            }
        }
        for i in 0..n {
            for h in 0..n_heads {
                krow.copy_from_slice(&k.row(i)[h * d..(h + 1) * d]);
                vrow.copy_from_slice(&v.row(i)[h * d..(h + 1) * d]);
                if let Some(kq) = &opts.kv_quant {
                    if start + i >= kq.keep_prefix_fp {
                        fake_quant_group(&mut krow, &kq.cfg);
                        fake_quant_group(&mut vrow, &kq.cfg);
                    }
                }
                cache.push(l, h, &krow, &vrow)?;
            }
        }

        let mut o = Matrix::zeros(n, cfg.d_model);
        for h in 0..n_heads {
            let keys = cache.keys(l, h);
            let vals = cache.values(l, h);
            let mut att = Matrix::zeros(n, total);
            for i in 0..n {
                let support = start + i + 1;
                let qh = &q.row(i)[h * d..(h + 1) * d];
                let row = &mut att.row_mut(i)[..support];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = crate::numcore::vector_dot(qh, keys.row(j)) * inv_sqrt_d;
                }
                softmax_in_place(row);
                let out = &mut o.row_mut(i)[h * d..(h + 1) * d];
                for (j, &p) in row.iter().enumerate() {
                    for (dst, &val) in out.iter_mut().zip(vals.row(j)) {
                        *dst += p * val;
                    }
                }
            }
            attention.push(att);
        }
        let attn_out = o.matmul(&lw.wo)?;
        let x1 = x.add(&attn_out)?;
        let b = rmsnorm_rows(&x1, &lw.ffn_norm, eps);
        let g = b.matmul(&lw.w_gate)?;
        let u = b.matmul(&lw.w_up)?;
        let mut hf = g.clone();
        for (hv, &uv) in hf.data_mut().iter_mut().zip(u.data()) {
            *hv = silu(*hv) * uv;
        }
        let y = x1.add(&hf.matmul(&lw.w_down)?)?;
        if record {
            tape.push(LayerTape {
                x: core::mem::replace(&mut x, y.clone()),
                q,
                x1,
                g,
                u,
            });
        } else {
            x = y.clone();
        }
        layer_outputs.push(y);
        attn_outputs.push(attn_out);
    }
    cache.set_seq_len(total);

    let logits = rmsnorm_rows(&x, &weights.final_norm, eps).matmul(&weights.output)?;
    let trace = ForwardTrace {
        start,
        layer_outputs,
        attn_outputs,
        attention,
        cache,
        logits,
        n_heads,
    };
    Ok((trace, record.then_some(Tape { layers: tape })))
}

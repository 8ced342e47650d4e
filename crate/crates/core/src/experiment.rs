//! Paired fp-versus-quantized measurements used by the sweeps and the
//! mixed-precision KV runs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::intactkv::{attach_and_prefill_with, quantize_intactkv, IntactKv};
use crate::metrics::mse_from_row;
use crate::model::{forward, forward_with, ForwardTrace, KvCache, KvQuant, ModelWeights, RunOptions};
use crate::quantizer::QuantConfig;

/// Per-layer MSE of quantized against fp activations over a continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationError {
    /// Transformer-layer outputs.
    pub layer_mse: Vec<f64>,
    /// Attention sub-layer outputs.
    pub attn_mse: Vec<f64>,
}

impl ContinuationError {
    pub fn last_layer(&self) -> f64 {
        *self.layer_mse.last().unwrap_or(&0.0)
    }

    pub fn mean_layer(&self) -> f64 {
        mean(&self.layer_mse)
    }

    pub fn mean_attn(&self) -> f64 {
        mean(&self.attn_mse)
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layer_mse.iter_mut().zip(&other.layer_mse) {
            *a += b;
        }
        for (a, b) in self.attn_mse.iter_mut().zip(&other.attn_mse) {
            *a += b;
        }
    }

    fn divide(&mut self, k: f64) {
        self.layer_mse.iter_mut().chain(self.attn_mse.iter_mut()).for_each(|v| *v /= k);
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Compares `q` (starting at absolute position `q.start`) with `fp`
/// (starting at 0) over absolute positions `eval_start..`.
pub fn continuation_error(fp: &ForwardTrace, q: &ForwardTrace, eval_start: usize) -> Result<ContinuationError> {
    let end = fp.start + fp.len();
    if fp.start != 0 || q.start + q.len() != end || eval_start < q.start || eval_start >= end {
        return Err(Error::Input(format!(
            "traces cover [{}, {}) and [{}, {}); cannot evaluate from {eval_start}",
            fp.start,
            end,
            q.start,
            q.start + q.len()
        )));
    }
    let pair = |a: &crate::numcore::Matrix, b: &crate::numcore::Matrix| -> Result<f64> {
        let b = b.slice_rows(q.start, end)?;
        mse_from_row(a, &b, eval_start - q.start)
    };
    let layer_mse = q
        .layer_outputs
        .iter()
        .zip(&fp.layer_outputs)
        .map(|(a, b)| pair(a, b))
        .collect::<Result<_>>()?;
    let attn_mse = q
        .attn_outputs
        .iter()
        .zip(&fp.attn_outputs)
        .map(|(a, b)| pair(a, b))
        .collect::<Result<_>>()?;
    Ok(ContinuationError { layer_mse, attn_mse })
}

/// Length of the prefix shared by every sequence.
pub fn common_prefix_len(corpus: &[Vec<u32>]) -> usize {
    let Some(first) = corpus.first() else { return 0 };
    let mut len = first.len();
    for s in &corpus[1..] {
        len = len.min(first.iter().zip(s).take_while(|(a, b)| a == b).count());
    }
    len
}

/// How the first `m` positions of the cache are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefixMode {
    /// No IntactKV: the quantized model processes the whole sequence.
    Quantized,
    /// Lossless prefix generated by the fp model.
    Intact,
    /// Lossless prefix, then fake-quantized with the given config.
    IntactQuantized(QuantConfig),
}

/// One paired run setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub prefix_len: usize,
    pub prefix: PrefixMode,
    pub kv_quant: Option<KvQuant>,
}

/// Mean [`ContinuationError`] over `corpus` for `setting`, evaluated from
/// absolute position `eval_start`.
pub fn evaluate(
    fp: &ModelWeights,
    q: &ModelWeights,
    corpus: &[Vec<u32>],
    setting: Setting,
    eval_start: usize,
) -> Result<ContinuationError> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let m = setting.prefix_len;
    let mut total: Option<ContinuationError> = None;
    for seq in corpus {
        if seq.len() <= eval_start || eval_start < m {
            return Err(Error::Input(format!(
                "sequence of length {} cannot be evaluated from {eval_start} with prefix {m}",
                seq.len()
            )));
        }
        let fp_trace = forward(fp, seq)?;
        let q_trace = match setting.prefix {
            PrefixMode::Quantized => forward_with(
                q,
                seq,
                RunOptions {
                    prefix: None,
                    kv_quant: setting.kv_quant,
                },
            )?,
            PrefixMode::Intact | PrefixMode::IntactQuantized(_) => {
                if m == 0 {
                    return Err(Error::Input("an IntactKV prefix needs length >= 1".into()));
                }
                let mut kv = IntactKv::generate(fp, &seq[..m])?;
                if let PrefixMode::IntactQuantized(cfg) = setting.prefix {
                    kv = quantize_intactkv(&kv, &cfg)?;
                }
                attach_and_prefill_with(q, &kv, &seq[m..], setting.kv_quant)?
            }
        };
        let e = continuation_error(&fp_trace, &q_trace, eval_start)?;
        match &mut total {
            Some(t) => t.accumulate(&e),
            None => total = Some(e),
        }
    }
    let mut total = total.expect("corpus is non-empty");
    total.divide(corpus.len() as f64);
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub error: ContinuationError,
}

/// MSE as a function of IntactKV size: `m = 0` is the fully quantized
/// baseline, `m ≥ 1` keeps the first `m` positions lossless. All rows are
/// evaluated from `max(common prefix, m_max)`.
pub fn sweep_kv_size(
    fp: &ModelWeights,
    q: &ModelWeights,
    corpus: &[Vec<u32>],
    m_max: usize,
) -> Result<(usize, Vec<SweepRow>)> {
    let eval_start = common_prefix_len(corpus).max(m_max);
    let mut rows = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        let prefix = if m == 0 { PrefixMode::Quantized } else { PrefixMode::Intact };
        let setting = Setting {
            prefix_len: m,
            prefix,
            kv_quant: None,
        };
        rows.push(SweepRow {
            m,
            error: evaluate(fp, q, corpus, setting, eval_start)?,
        });
    }
    Ok((eval_start, rows))
}

/// Largest absolute key and value entries over positions `< m` and `≥ m`,
/// across all layers and heads: `(prefix_k, rest_k, prefix_v, rest_v)`.
pub fn split_absmax(cache: &KvCache, m: usize) -> Result<(f64, f64, f64, f64)> {
    if m == 0 || m >= cache.seq_len() {
        return Err(Error::Index {
            op: "split_absmax",
            index: m,
            limit: cache.seq_len(),
        });
    }
    let mut out = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for layer in 0..cache.n_layers() {
        for head in 0..cache.n_heads() {
            let k = cache.keys(layer, head);
            let v = cache.values(layer, head);
            for r in 0..cache.seq_len() {
                let km = k.row(r).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
                let vm = v.row(r).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
                if r < m {
                    out.0 = out.0.max(km);
                    out.2 = out.2.max(vm);
                } else {
                    out.1 = out.1.max(km);
                    out.3 = out.3.max(vm);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use alloc::vec;

    fn tiny() -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq: 16,
            ..ModelConfig::default()
        };
        init_random(&cfg, 1).unwrap()
    }

    #[test]
    fn identical_models_have_zero_error() {
        let w = tiny();
        let corpus = vec![vec![0, 3, 4, 5, 6, 1], vec![0, 3, 4, 9, 2, 2]];
        let (start, rows) = sweep_kv_size(&w, &w, &corpus, 2).unwrap();
        assert_eq!(start, 3);
        for r in rows {
            assert!(r.error.layer_mse.iter().all(|&v| v < 1e-20), "{r:?}");
        }
    }

    #[test]
    fn common_prefix() {
        assert_eq!(common_prefix_len(&[vec![1, 2, 3], vec![1, 2, 4]]), 2);
        assert_eq!(common_prefix_len(&[vec![1, 2, 3]]), 3);
        assert_eq!(common_prefix_len(&[]), 0);
    }

    #[test]
    fn eval_start_must_cover_prefix() {
        let w = tiny();
        let s = Setting {
            prefix_len: 3,
            prefix: PrefixMode::Intact,
            kv_quant: None,
        };
        assert!(evaluate(&w, &w, &[vec![0, 1, 2, 3, 4]], s, 2).is_err());
        assert!(evaluate(&w, &w, &[vec![0, 1, 2]], s, 3).is_err());
    }

    #[test]
    fn absmax_split() {
        let w = tiny();
        let t = forward(&w, &[0, 1, 2, 3]).unwrap();
        let (pk, rk, pv, rv) = split_absmax(&t.cache, 1).unwrap();
        let all_k = (0..2)
            .flat_map(|l| (0..2).map(move |h| (l, h)))
            .map(|(l, h)| t.cache.keys(l, h).max_abs())
            .fold(0.0_f64, f64::max);
        assert_eq!(pk.max(rk), all_k);
        assert!(pv > 0.0 && rv > 0.0);
        assert!(split_absmax(&t.cache, 4).is_err());
    }
}

//! Uniform b-bit quantization.
//!
//! Weights are quantized group-wise along each row (`ŵ = s · (code − z)`,
//! codes in `{0, …, 2^b − 1}`); KV caches are quantized dynamically per
//! head and per block of positions.
//!
//! Conventions:
//! * rounding is half-away-from-zero;
//! * the asymmetric range is widened to include 0 so the zero point always
//!   lies inside the code range;
//! * scales are rounded up to 44 significant bits, which makes every
//!   `s · k` with `|k| < 2^9` exact. Re-quantizing a dequantized group then
//!   recovers the same scale, so [`fake_quant`] is bitwise idempotent;
//! * a group whose elements are all equal to `c` is stored with scale `|c|`
//!   (or 1 when `c == 0`) and codes `z + sign(c)`, which reproduces `c`
//!   exactly.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{KvCache, ModelWeights};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    /// Elements per group along a row. For KV-cache quantization this is
    /// the number of consecutive positions sharing one set of parameters.
    pub group_size: usize,
    pub symmetric: bool,
}

impl QuantConfig {
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        let cfg = Self {
            bits,
            group_size,
            symmetric: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Input(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::Input("group_size must be at least 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Integer codes plus per-group scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u8>,
    /// Row-major over `(row, group)`.
    pub scales: Vec<f64>,
    pub zero_points: Vec<u8>,
    pub config: QuantConfig,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.config.group_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GroupParams {
    pub scale: f64,
    pub zero: u8,
}

/// Smallest value `>= s` whose low 9 mantissa bits are zero.
fn coarsen_scale(s: f64) -> f64 {
    const MASK: u64 = (1 << 9) - 1;
    let bits = s.to_bits();
    if bits & MASK == 0 {
        s
    } else {
        f64::from_bits((bits | MASK) + 1)
    }
}

#[inline]
fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}

pub(crate) fn group_params(values: &[f64], cfg: &QuantConfig) -> GroupParams {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let half = 1u32 << (cfg.bits - 1);
    if lo == hi {
        let c = lo;
        return GroupParams {
            scale: if c == 0.0 { 1.0 } else { c.abs() },
            zero: half as u8,
        };
    }
    if cfg.symmetric {
        let amax = lo.abs().max(hi.abs());
        GroupParams {
            scale: coarsen_scale(amax / f64::from(half - 1)),
            zero: half as u8,
        }
    } else {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let scale = coarsen_scale((hi - lo) / f64::from(cfg.max_code()));
        let zero = round_half_away(-lo / scale).clamp(0.0, f64::from(cfg.max_code()));
        GroupParams {
            scale,
            zero: zero as u8,
        }
    }
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

pub(crate) fn encode_group(values: &[f64], p: GroupParams, cfg: &QuantConfig, out: &mut Vec<u8>) {
    if is_constant(values) {
        let c = values[0];
        let code = if c > 0.0 {
            p.zero + 1
        } else if c < 0.0 {
            p.zero - 1
        } else {
            p.zero
        };
        out.extend(core::iter::repeat_n(code, values.len()));
        return;
    }
    let max = f64::from(cfg.max_code());
    let z = f64::from(p.zero);
    for &v in values {
        let code = (round_half_away(v / p.scale) + z).clamp(0.0, max);
        out.push(code as u8);
    }
}

#[inline]
pub(crate) fn decode_code(code: u8, p: GroupParams) -> f64 {
    p.scale * (f64::from(code) - f64::from(p.zero))
}

/// Fake-quantizes one group in place.
pub(crate) fn fake_quant_group(values: &mut [f64], cfg: &QuantConfig) {
    let p = group_params(values, cfg);
    let mut codes = Vec::with_capacity(values.len());
    encode_group(values, p, cfg, &mut codes);
    for (v, &c) in values.iter_mut().zip(&codes) {
        *v = decode_code(c, p);
    }
}

/// Group-wise quantization along each row of `w`. The last group of a row
/// may be shorter than `group_size`.
pub fn quantize_tensor(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::Domain("quantize_tensor"));
    }
    let g = cfg.group_size;
    let groups = w.cols().div_ceil(g);
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut scales = Vec::with_capacity(w.rows() * groups);
    let mut zero_points = Vec::with_capacity(w.rows() * groups);
    for r in 0..w.rows() {
        for chunk in w.row(r).chunks(g) {
            let p = group_params(chunk, cfg);
            encode_group(chunk, p, cfg, &mut codes);
            scales.push(p.scale);
            zero_points.push(p.zero);
        }
    }
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        codes,
        scales,
        zero_points,
        config: *cfg,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let g = q.config.group_size;
    let groups = q.groups_per_row();
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        let gi = r * groups + c / g;
        let p = GroupParams {
            scale: q.scales[gi],
            zero: q.zero_points[gi],
        };
        decode_code(q.codes[r * q.cols + c], p)
    })
}

/// `dequantize(quantize_tensor(w, cfg))`.
pub fn fake_quant(w: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    Ok(dequantize(&quantize_tensor(w, cfg)?))
}

/// Fake-quantizes a weight stored as `(in × out)` with groups running along
/// the input dimension, i.e. along the columns of the stored matrix.
fn fake_quant_input_groups(w: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    Ok(fake_quant(&w.transpose(), cfg)?.transpose())
}

/// Round-to-nearest quantization of every projection matrix (attention
/// q/k/v/o, FFN gate/up/down, output head). Embeddings and norm gains stay
/// full precision.
pub fn quantize_model_weights(weights: &ModelWeights, cfg: &QuantConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut out = weights.clone();
    for layer in &mut out.layers {
        for m in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w_gate,
            &mut layer.w_up,
            &mut layer.w_down,
        ] {
            *m = fake_quant_input_groups(m, cfg)?;
        }
    }
    out.output = fake_quant_input_groups(&out.output, cfg)?;
    Ok(out)
}

/// Dynamic asymmetric (or symmetric, per `cfg`) quantization of a KV cache.
///
/// For each layer and head, positions `>= keep_prefix_fp` are fake-quantized
/// in blocks of `cfg.group_size` consecutive positions (block 1 = one
/// parameter set per head per position), starting at `keep_prefix_fp`.
/// The first `keep_prefix_fp` positions are copied unchanged.
pub fn quantize_kv_dynamic(kv: &KvCache, cfg: &QuantConfig, keep_prefix_fp: usize) -> Result<KvCache> {
    cfg.validate()?;
    if keep_prefix_fp > kv.seq_len() {
        return Err(Error::Index {
            op: "quantize_kv_dynamic",
            index: keep_prefix_fp,
            limit: kv.seq_len(),
        });
    }
    let mut out = kv.clone();
    for layer in 0..kv.n_layers() {
        for head in 0..kv.n_heads() {
            let (k, v) = out.head_mut(layer, head);
            quantize_rows_dynamic(k, cfg, keep_prefix_fp);
            quantize_rows_dynamic(v, cfg, keep_prefix_fp);
        }
    }
    Ok(out)
}

pub(crate) fn quantize_rows_dynamic(m: &mut Matrix, cfg: &QuantConfig, from_row: usize) {
    let width = m.cols();
    let block = cfg.group_size * width;
    let data = &mut m.data_mut()[from_row * width..];
    for chunk in data.chunks_mut(block) {
        fake_quant_group(chunk, cfg);
    }
}

//! Binary model and IntactKV files.
//!
//! Both are little-endian. A tensor is a `u64` element count followed by
//! that many `f64` values, row-major.
//!
//! Model file: `"IKVM"`, `u32` version, config (`n_layers`, `d_model`,
//! `n_heads`, `d_ff`, `vocab_size`, `max_seq` as `u32`; `rope_theta`,
//! `rmsnorm_eps` as `f64`; `use_rope` as a `u32` flag), then the embedding,
//! per layer `wq wk wv wo w_gate w_up w_down attn_norm ffn_norm`, the final
//! norm and the output head.
//!
//! IntactKV file: `"IKVP"`, `u32` version, `u64` token count, `u32` ids, a
//! provenance byte, then per layer and head the key and value tensors.
//! The layer/head split is not stored, so loading needs the model config.

use std::path::Path;

use intactkv_core::intactkv::{IntactKv, Provenance};
use intactkv_core::model::{KvCache, LayerWeights, ModelConfig, ModelWeights};
use intactkv_core::numcore::Matrix;

use crate::error::{LabError, LabResult};
use crate::io::{read_bytes, write_atomic};

pub const MODEL_MAGIC: &[u8; 4] = b"IKVM";
pub const KV_MAGIC: &[u8; 4] = b"IKVP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: u64,
    pub msg: String,
}

impl DecodeError {
    fn at(offset: usize, msg: impl Into<String>) -> Self {
        Self {
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    pub fn with_path(self, path: &Path) -> LabError {
        LabError::Format {
            path: path.to_path_buf(),
            offset: self.offset,
            msg: self.msg,
        }
    }
}

type Decoded<T> = Result<T, DecodeError>;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, data: &[f64]) {
        self.u64(data.len() as u64);
        data.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Decoded<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::at(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Decoded<()> {
        let m = self.take(4, "magic")?;
        if m != expect {
            return Err(DecodeError::at(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(expect)),
            ));
        }
        let at = self.pos;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(DecodeError::at(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Decoded<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Decoded<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Decoded<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Decoded<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, what: &str, expect: usize) -> Decoded<Vec<f64>> {
        let at = self.pos;
        let n = self.u64(what)?;
        if n != expect as u64 {
            return Err(DecodeError::at(at, format!("{what}: {n} elements, expected {expect}")));
        }
        let mut out = Vec::with_capacity(expect);
        for _ in 0..expect {
            let at = self.pos;
            let v = self.f64(what)?;
            if !v.is_finite() {
                return Err(DecodeError::at(at, format!("{what}: non-finite value")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn matrix(&mut self, what: &str, rows: usize, cols: usize) -> Decoded<Matrix> {
        let data = self.tensor(what, rows * cols)?;
        Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
    }

    fn finish(&self) -> Decoded<()> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::at(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_model(w: &ModelWeights) -> Vec<u8> {
    let mut out = Writer(Vec::with_capacity(64 + 8 * w.parameter_count()));
    out.0.extend_from_slice(MODEL_MAGIC);
    out.u32(VERSION);
    let c = &w.config;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq] {
        out.u32(v as u32);
    }
    out.f64(c.rope_theta);
    out.f64(c.rmsnorm_eps);
    out.u32(u32::from(c.use_rope));
    out.tensor(w.token_embedding.data());
    for l in &w.layers {
        for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down] {
            out.tensor(m.data());
        }
        out.tensor(&l.attn_norm);
        out.tensor(&l.ffn_norm);
    }
    out.tensor(&w.final_norm);
    out.tensor(w.output.data());
    out.0
}

pub fn decode_model(bytes: &[u8]) -> Decoded<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    let cfg_at = r.pos;
    let mut ints = [0usize; 6];
    for (i, name) in ["n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"]
        .iter()
        .enumerate()
    {
        ints[i] = r.u32(name)? as usize;
    }
    let rope_theta = r.f64("rope_theta")?;
    let rmsnorm_eps = r.f64("rmsnorm_eps")?;
    let flag_at = r.pos;
    let use_rope = match r.u32("use_rope")? {
        0 => false,
        1 => true,
        v => return Err(DecodeError::at(flag_at, format!("use_rope flag {v} is not 0 or 1"))),
    };
    let config = ModelConfig {
        n_layers: ints[0],
        d_model: ints[1],
        n_heads: ints[2],
        d_ff: ints[3],
        vocab_size: ints[4],
        max_seq: ints[5],
        rope_theta,
        rmsnorm_eps,
        use_rope,
    };
    config
        .validate()
        .map_err(|e| DecodeError::at(cfg_at, format!("invalid config: {e}")))?;
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let token_embedding = r.matrix("token_embedding", v, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: r.matrix("wq", d, d)?,
            wk: r.matrix("wk", d, d)?,
            wv: r.matrix("wv", d, d)?,
            wo: r.matrix("wo", d, d)?,
            w_gate: r.matrix("w_gate", d, f)?,
            w_up: r.matrix("w_up", d, f)?,
            w_down: r.matrix("w_down", f, d)?,
            attn_norm: r.tensor("attn_norm", d)?,
            ffn_norm: r.tensor("ffn_norm", d)?,
        });
    }
    let final_norm = r.tensor("final_norm", d)?;
    let output = r.matrix("output", d, v)?;
    r.finish()?;
    Ok(ModelWeights {
        config,
        token_embedding,
        layers,
        final_norm,
        output,
    })
}

pub fn encode_intactkv(kv: &IntactKv) -> Vec<u8> {
    let mut out = Writer(Vec::with_capacity(32 + 8 * kv.element_count()));
    out.0.extend_from_slice(KV_MAGIC);
    out.u32(VERSION);
    out.u64(kv.prefix_len() as u64);
    kv.prefix_tokens().iter().for_each(|&t| out.u32(t));
    out.0.push(kv.provenance().as_byte());
    let c = kv.cache();
    for (k, v) in c.keys_all().iter().zip(c.values_all()) {
        out.tensor(k.data());
        out.tensor(v.data());
    }
    out.0
}

pub fn decode_intactkv(bytes: &[u8], cfg: &ModelConfig) -> Decoded<IntactKv> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(KV_MAGIC)?;
    let at = r.pos;
    let m = r.u64("token count")?;
    if m == 0 || m > cfg.max_seq as u64 {
        return Err(DecodeError::at(at, format!("prefix length {m} outside 1..={}", cfg.max_seq)));
    }
    let m = m as usize;
    let mut tokens = Vec::with_capacity(m);
    for _ in 0..m {
        let at = r.pos;
        let t = r.u32("token id")?;
        if t as usize >= cfg.vocab_size {
            return Err(DecodeError::at(at, format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        tokens.push(t);
    }
    let at = r.pos;
    let pb = r.u8("provenance")?;
    let provenance = Provenance::from_byte(pb).ok_or_else(|| DecodeError::at(at, format!("unknown provenance {pb}")))?;
    let hd = cfg.head_dim();
    let count = cfg.n_layers * cfg.n_heads;
    let (mut keys, mut values) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        keys.push(r.matrix("keys", m, hd)?);
        values.push(r.matrix("values", m, hd)?);
    }
    r.finish()?;
    let cache = KvCache::from_parts(cfg.n_layers, cfg.n_heads, keys, values).expect("shapes checked");
    Ok(IntactKv::from_parts(tokens, provenance, cache).expect("lengths checked"))
}

pub fn save_model(path: &Path, w: &ModelWeights) -> LabResult<()> {
    write_atomic(path, &encode_model(w))
}

pub fn load_model(path: &Path) -> LabResult<ModelWeights> {
    decode_model(&read_bytes(path)?).map_err(|e| e.with_path(path))
}

pub fn save_intactkv(path: &Path, kv: &IntactKv) -> LabResult<()> {
    write_atomic(path, &encode_intactkv(kv))
}

pub fn load_intactkv(path: &Path, cfg: &ModelConfig) -> LabResult<IntactKv> {
    decode_intactkv(&read_bytes(path)?, cfg).map_err(|e| e.with_path(path))
}

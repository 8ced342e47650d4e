use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Per-layer, per-head keys (post-rotary) and values, each `seq_len × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    seq_len: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl KvCache {
    pub fn empty(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        let blank = || (0..n_layers * n_heads).map(|_| Matrix::zeros(0, head_dim)).collect();
        Self {
            n_layers,
            n_heads,
            head_dim,
            seq_len: 0,
            keys: blank(),
            values: blank(),
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self::empty(cfg.n_layers, cfg.n_heads, cfg.head_dim())
    }

    /// Builds a cache from per-(layer, head) matrices ordered layer-major.
    pub fn from_parts(n_layers: usize, n_heads: usize, keys: Vec<Matrix>, values: Vec<Matrix>) -> Result<Self> {
        let count = n_layers * n_heads;
        if keys.len() != count || values.len() != count || count == 0 {
            return Err(Error::Input(alloc::format!(
                "expected {count} key and value matrices, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        let (seq_len, head_dim) = (keys[0].rows(), keys[0].cols());
        if keys.iter().chain(&values).any(|m| m.rows() != seq_len || m.cols() != head_dim) {
            return Err(Error::Input("key/value matrices disagree in shape".into()));
        }
        Ok(Self {
            n_layers,
            n_heads,
            head_dim,
            seq_len,
            keys,
            values,
        })
    }

    #[inline]
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    #[inline]
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer * self.n_heads + head]
    }

    #[inline]
    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer * self.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> (&mut Matrix, &mut Matrix) {
        let i = layer * self.n_heads + head;
        (&mut self.keys[i], &mut self.values[i])
    }

    pub fn keys_all(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn values_all(&self) -> &[Matrix] {
        &self.values
    }

    /// Copy of positions `[0, len)`.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len > self.seq_len {
            return Err(Error::Index {
                op: "KvCache::prefix",
                index: len,
                limit: self.seq_len,
            });
        }
        let cut = |ms: &[Matrix]| -> Result<Vec<Matrix>> { ms.iter().map(|m| m.slice_rows(0, len)).collect() };
        Ok(Self {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            seq_len: len,
            keys: cut(&self.keys)?,
            values: cut(&self.values)?,
        })
    }

    /// Appends one position to a single head; callers keep heads in sync
    /// and finish with [`KvCache::set_seq_len`].
    pub(crate) fn push(&mut self, layer: usize, head: usize, k: &[f64], v: &[f64]) -> Result<()> {
        let i = layer * self.n_heads + head;
        self.keys[i].push_row(k)?;
        self.values[i].push_row(v)
    }

    pub(crate) fn set_seq_len(&mut self, len: usize) {
        debug_assert!(self.keys.iter().all(|m| m.rows() == len));
        self.seq_len = len;
    }

    pub fn matches_config(&self, cfg: &ModelConfig) -> bool {
        self.n_layers == cfg.n_layers && self.n_heads == cfg.n_heads && self.head_dim == cfg.head_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).all(Matrix::is_finite)
    }
}

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size × d_model`.
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `d_model × vocab_size`.
    pub output: Matrix,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down]
                    .iter()
                    .map(|m| m.data().len())
                    .sum::<usize>()
                    + l.attn_norm.len()
                    + l.ffn_norm.len()
            })
            .sum();
        self.token_embedding.data().len() + per_layer + self.final_norm.len() + self.output.data().len()
    }

    /// Checks every shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let check = |name: &str, m: &Matrix, r: usize, k: usize| -> Result<()> {
            if m.rows() != r || m.cols() != k {
                return Err(Error::Input(format!(
                    "{name} is {}x{}, expected {r}x{k}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Domain("ModelWeights::validate"));
            }
            Ok(())
        };
        let check_gain = |name: &str, g: &[f64]| -> Result<()> {
            if g.len() != d {
                return Err(Error::Input(format!("{name} has {} entries, expected {d}", g.len())));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Domain("ModelWeights::validate"));
            }
            Ok(())
        };
        check("token_embedding", &self.token_embedding, v, d)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Input(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for l in &self.layers {
            check("wq", &l.wq, d, d)?;
            check("wk", &l.wk, d, d)?;
            check("wv", &l.wv, d, d)?;
            check("wo", &l.wo, d, d)?;
            check("w_gate", &l.w_gate, d, f)?;
            check("w_up", &l.w_up, d, f)?;
            check("w_down", &l.w_down, f, d)?;
            check_gain("attn_norm", &l.attn_norm)?;
            check_gain("ffn_norm", &l.ffn_norm)?;
        }
        check_gain("final_norm", &self.final_norm)?;
        check("output", &self.output, d, v)
    }
}

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Reproducible random weights from a ChaCha8 stream seeded with `seed`.
///
/// Draw order: embedding, then per layer Wq, Wk, Wv, Wo, gate, up, down,
/// then the output head. Projections are uniform in `±1/sqrt(fan_in)`,
/// embeddings uniform in `±1`; norm gains start at 1.
pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let a_d = 1.0 / libm::sqrt(d as f64);
    let a_f = 1.0 / libm::sqrt(f as f64);
    let token_embedding = uniform_matrix(&mut rng, v, d, 1.0);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: uniform_matrix(&mut rng, d, d, a_d),
            wk: uniform_matrix(&mut rng, d, d, a_d),
            wv: uniform_matrix(&mut rng, d, d, a_d),
            wo: uniform_matrix(&mut rng, d, d, a_d),
            w_gate: uniform_matrix(&mut rng, d, f, a_d),
            w_up: uniform_matrix(&mut rng, d, f, a_d),
            w_down: uniform_matrix(&mut rng, f, d, a_f),
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        })
        .collect();
    let output = uniform_matrix(&mut rng, d, v, a_d);
    Ok(ModelWeights {
        config: *cfg,
        token_embedding,
        layers,
        final_norm: vec![1.0; d],
        output,
    })
}

/// Scales the embedding of `token_id` by `scale` on `channels`, creating a
/// token-specific massive activation in the residual stream.
pub fn inject_attention_sink(
    weights: &ModelWeights,
    token_id: u32,
    channels: &[usize],
    scale: f64,
) -> Result<ModelWeights> {
    let cfg = &weights.config;
    let t = token_id as usize;
    if t >= cfg.vocab_size {
        return Err(Error::Index {
            op: "inject_attention_sink",
            index: t,
            limit: cfg.vocab_size,
        });
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= cfg.d_model) {
        return Err(Error::Index {
            op: "inject_attention_sink",
            index: c,
            limit: cfg.d_model,
        });
    }
    if !(scale.is_finite() && scale >= 1.0) {
        return Err(Error::Input(format!("sink scale must be >= 1, got {scale}")));
    }
    let mut out = weights.clone();
    for &c in channels {
        let v = out.token_embedding.get(t, c);
        out.token_embedding.set(t, c, v * scale);
    }
    Ok(out)
}

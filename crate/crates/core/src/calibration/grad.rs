//! Reverse-mode gradient of the layer-wise loss with respect to the prefix
//! keys and values.
//!
//! The quantized branch is differentiated through every layer: SwiGLU,
//! RMSNorm, the residual stream, attention (softmax Jacobian
//! `diag(s) − s sᵀ` on the key path, score-weighted accumulation on the
//! value path) and the rotary embedding on continuation queries and keys.
//! Prefix keys are cached post-rotary, so they receive the score gradient
//! directly.

use alloc::vec;
use alloc::vec::Vec;

use super::loss::{breakdown, reference, LossBreakdown, Reference};
use crate::error::Result;
use crate::intactkv::IntactKv;
use crate::model::{run, ForwardTrace, ModelWeights, RunOptions, Tape};
use crate::numcore::{rmsnorm_backward_row, rope_rotate_row, silu, silu_grad, vector_dot, Matrix};

/// Gradient shaped like an [`IntactKv`]: per `(layer, head)`, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixGrad {
    pub n_heads: usize,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl PrefixGrad {
    fn zeros(n_layers: usize, n_heads: usize, m: usize, d: usize) -> Self {
        let blank = || (0..n_layers * n_heads).map(|_| Matrix::zeros(m, d)).collect();
        Self {
            n_heads,
            keys: blank(),
            values: blank(),
        }
    }

    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer * self.n_heads + head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer * self.n_heads + head]
    }

    /// Same ordering as [`IntactKv::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, v) in self.keys.iter().zip(&self.values) {
            out.extend_from_slice(k.data());
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.keys.iter().chain(&self.values).fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Exact gradient of `layerwise_loss` with respect to every prefix entry.
pub fn grad_intactkv(fp: &ModelWeights, q: &ModelWeights, theta: &IntactKv, tokens: &[u32]) -> Result<PrefixGrad> {
    let r = reference(fp, theta, tokens, 0)?;
    Ok(loss_and_grad(q, theta, tokens, &r)?.1)
}

pub(crate) fn loss_and_grad(
    q: &ModelWeights,
    theta: &IntactKv,
    tokens: &[u32],
    r: &Reference,
) -> Result<(LossBreakdown, PrefixGrad)> {
    let opts = RunOptions {
        prefix: Some(theta.cache()),
        kv_quant: None,
    };
    let (trace, tape) = run(q, &tokens[theta.prefix_len()..], opts, true)?;
    let tape = tape.expect("tape requested");
    let loss = breakdown(&trace, r);
    let residuals = trace
        .layer_outputs
        .iter()
        .zip(&r.outputs)
        .map(|(yq, yf)| {
            let mut diff = yq.sub(yf)?;
            let cut = r.loss_row * diff.cols();
            diff.data_mut()[..cut].fill(0.0);
            Ok(diff)
        })
        .collect::<Result<Vec<_>>>()?;
    let grad = backward(q, &trace, &tape, &residuals)?;
    Ok((loss, grad))
}

/// Back-propagates `residuals[l] = ∂loss/∂(layer l output)` (direct terms
/// only) through the recorded pass.
pub(crate) fn backward(w: &ModelWeights, trace: &ForwardTrace, tape: &Tape, residuals: &[Matrix]) -> Result<PrefixGrad> {
    let cfg = &w.config;
    let (n_heads, d, dm) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
    let n = trace.len();
    let m = trace.start;
    let eps = cfg.rmsnorm_eps;
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let mut grad = PrefixGrad::zeros(cfg.n_layers, n_heads, m, d);
    let mut gy = Matrix::zeros(n, dm);
    let mut ga_buf = vec![0.0; trace.cache.seq_len()];

    for l in (0..cfg.n_layers).rev() {
        let lw = &w.layers[l];
        let lt = &tape.layers[l];
        gy.add_assign(&residuals[l])?;

        // y = x1 + down(silu(gate(b)) ⊙ up(b)),  b = rmsnorm(x1)
        let ghf = gy.matmul_t(&lw.w_down)?;
        let mut gg = ghf.clone();
        let mut gu = ghf;
        for ((ggv, guv), (&gv, &uv)) in gg
            .data_mut()
            .iter_mut()
            .zip(gu.data_mut().iter_mut())
            .zip(lt.g.data().iter().zip(lt.u.data()))
        {
            let upstream = *ggv;
            *ggv = upstream * uv * silu_grad(gv);
            *guv = upstream * silu(gv);
        }
        let mut gb = gg.matmul_t(&lw.w_gate)?;
        gb.add_assign(&gu.matmul_t(&lw.w_up)?)?;
        let mut gx1 = gy;
        for r in 0..n {
            rmsnorm_backward_row(lt.x1.row(r), &lw.ffn_norm, eps, gb.row(r), gx1.row_mut(r));
        }

        // x1 = x + attn(a) · Wo,  a = rmsnorm(x)
        let go = gx1.matmul_t(&lw.wo)?;
        let mut gq = Matrix::zeros(n, dm);
        let mut gk = Matrix::zeros(n, dm);
        let mut gv = Matrix::zeros(n, dm);
        for h in 0..n_heads {
            let span = h * d..(h + 1) * d;
            let keys = trace.cache.keys(l, h);
            let vals = trace.cache.values(l, h);
            let att = trace.attention(l, h);
            let gi = l * n_heads + h;
            for i in 0..n {
                let support = m + i + 1;
                let go_i = &go.row(i)[span.clone()];
                let a_row = &att.row(i)[..support];
                let ga = &mut ga_buf[..support];
                for (j, g) in ga.iter_mut().enumerate() {
                    *g = vector_dot(go_i, vals.row(j));
                }
                let centre = vector_dot(a_row, ga);
                let q_i: Vec<f64> = lt.q.row(i)[span.clone()].to_vec();
                for j in 0..support {
                    let p = a_row[j];
                    let gs = p * (ga[j] - centre) * inv_sqrt_d;
                    {
                        let gq_i = &mut gq.row_mut(i)[span.clone()];
                        for (dst, &kv) in gq_i.iter_mut().zip(keys.row(j)) {
                            *dst += gs * kv;
                        }
                    }
                    let (k_dst, v_dst) = if j < m {
                        (grad.keys[gi].row_mut(j), grad.values[gi].row_mut(j))
                    } else {
                        (&mut gk.row_mut(j - m)[span.clone()], &mut gv.row_mut(j - m)[span.clone()])
                    };
                    for (dst, &qv) in k_dst.iter_mut().zip(&q_i) {
                        *dst += gs * qv;
                    }
                    for (dst, &g) in v_dst.iter_mut().zip(go_i) {
                        *dst += p * g;
                    }
                }
            }
        }
        if cfg.use_rope {
            for i in 0..n {
                for h in 0..n_heads {
                    let span = h * d..(h + 1) * d;
                    rope_rotate_row(&mut gq.row_mut(i)[span.clone()], m + i, cfg.rope_theta, true);
                    rope_rotate_row(&mut gk.row_mut(i)[span], m + i, cfg.rope_theta, true);
                }
            }
        }
        let mut g_norm = gq.matmul_t(&lw.wq)?;
        g_norm.add_assign(&gk.matmul_t(&lw.wk)?)?;
        g_norm.add_assign(&gv.matmul_t(&lw.wv)?)?;
        let mut gx = gx1;
        for r in 0..n {
            rmsnorm_backward_row(lt.x.row(r), &lw.attn_norm, eps, g_norm.row(r), gx.row_mut(r));
        }
        gy = gx;
    }
    Ok(grad)
}

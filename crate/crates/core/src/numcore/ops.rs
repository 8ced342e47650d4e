use alloc::format;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{shape, Result};

/// Numerically stable softmax of one row, in place (max subtraction).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)` written into `out`.
pub fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + eps);
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xi * inv;
    }
}

pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(shape(
            "rmsnorm",
            format!("input length {} vs gain length {}", x.len(), gain.len()),
        ));
    }
    let mut out = alloc::vec![0.0; x.len()];
    rmsnorm_row(x, gain, eps, &mut out);
    Ok(out)
}

/// Vector-Jacobian product of [`rmsnorm_row`] with respect to `x`,
/// accumulated into `grad_x`.
pub fn rmsnorm_backward_row(x: &[f64], gain: &[f64], eps: f64, grad_y: &[f64], grad_x: &mut [f64]) {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = libm::sqrt(ms + eps);
    let inv = 1.0 / r;
    let mut proj = 0.0;
    for ((&xi, &g), &gy) in x.iter().zip(gain).zip(grad_y) {
        proj += g * gy * xi;
    }
    let coef = proj / (n * r * r * r);
    for (((gx, &xi), &g), &gy) in grad_x.iter_mut().zip(x).zip(gain).zip(grad_y) {
        *gx += g * gy * inv - coef * xi;
    }
}

/// Rotates consecutive channel pairs `(2i, 2i+1)` of `row` by
/// `position · theta_base^(-2i/len)`. With `inverse` the rotation angle is
/// negated, which is also the transpose used when back-propagating.
pub fn rope_rotate_row(row: &mut [f64], position: usize, theta_base: f64, inverse: bool) {
    let dim = row.len();
    let pos = position as f64;
    for pair in 0..dim / 2 {
        let freq = libm::pow(theta_base, -2.0 * pair as f64 / dim as f64);
        let angle = pos * freq;
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let s = if inverse { -s } else { s };
        let x0 = row[2 * pair];
        let x1 = row[2 * pair + 1];
        row[2 * pair] = x0 * c - x1 * s;
        row[2 * pair + 1] = x0 * s + x1 * c;
    }
}

/// Applies rotary position embedding to each row of `x`; row `r` sits at
/// absolute position `start_position + r`.
pub fn rope_apply(x: &Matrix, start_position: usize, theta_base: f64) -> Result<Matrix> {
    if x.cols() % 2 != 0 {
        return Err(shape(
            "rope_apply",
            format!("rotary embedding needs an even width, got {}", x.cols()),
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        rope_rotate_row(out.row_mut(r), start_position + r, theta_base, false);
    }
    Ok(out)
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + libm::exp(-x));
    s * (1.0 + x * (1.0 - s))
}

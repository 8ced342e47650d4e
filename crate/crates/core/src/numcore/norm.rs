use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::matrix::dot;
use super::Matrix;
use crate::error::{shape, Result};

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Square root of the sum of squares.
    Frobenius,
    /// Largest singular value.
    Spectral,
    /// Largest row Euclidean norm (the 2→∞ operator norm).
    TwoInf,
}

pub fn vector_norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

pub fn matrix_norm(m: &Matrix, kind: NormKind) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(shape("matrix_norm", format!("empty {}x{} matrix", m.rows(), m.cols())));
    }
    Ok(match kind {
        NormKind::Frobenius => libm::sqrt(m.sum_sq()),
        NormKind::TwoInf => (0..m.rows())
            .map(|r| vector_norm(m.row(r)))
            .fold(0.0, f64::max),
        NormKind::Spectral => spectral_norm(m),
    })
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Starts from the all-ones vector and stops when the Rayleigh quotient
/// changes by at most 1e-12 relative, or after 10000 iterations. A zero
/// matrix returns 0. If the all-ones start lies in the null space of `m`,
/// the iteration restarts from the column of `mᵀm` with the largest norm.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let n = m.cols();
    if m.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let ones = vec![1.0; n];
    if let Some(lambda) = power_iterate(m, ones) {
        return libm::sqrt(lambda);
    }
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = gram_apply(m, &e);
        let norm = vector_norm(&col);
        if norm > best_norm {
            best_norm = norm;
            best = j;
        }
    }
    let mut e = vec![0.0; n];
    e[best] = 1.0;
    let start = gram_apply(m, &e);
    libm::sqrt(power_iterate(m, start).unwrap_or(0.0))
}

fn gram_apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mv: Vec<f64> = (0..m.rows()).map(|r| dot(m.row(r), v)).collect();
    let mut out = vec![0.0; m.cols()];
    for (r, &coef) in mv.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(m.row(r)) {
            *o += coef * x;
        }
    }
    out
}

/// Returns the dominant eigenvalue of `mᵀm`, or `None` if the iterate
/// collapses to zero.
fn power_iterate(m: &Matrix, start: Vec<f64>) -> Option<f64> {
    let norm = vector_norm(&start);
    if norm == 0.0 {
        return None;
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / norm).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = gram_apply(m, &v);
        let next = dot(&v, &w);
        let wn = vector_norm(&w);
        if wn == 0.0 {
            return None;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        let done = (next - lambda).abs() <= POWER_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    Some(lambda)
}

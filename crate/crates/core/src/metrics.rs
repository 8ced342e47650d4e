//! Error and likelihood metrics shared by the experiments.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape, Error, Result};
use crate::numcore::Matrix;

/// Mean squared difference over rows `from_row..` of two equally shaped
/// matrices.
pub fn mse_from_row(a: &Matrix, b: &Matrix, from_row: usize) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape(
            "mse_from_row",
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    if from_row >= a.rows() {
        return Err(Error::Index {
            op: "mse_from_row",
            index: from_row,
            limit: a.rows(),
        });
    }
    let start = from_row * a.cols();
    let sum: f64 = a.data()[start..]
        .iter()
        .zip(&b.data()[start..])
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / (a.data().len() - start) as f64)
}

/// Negative log-likelihood of `target` under softmax(`logits`).
pub fn token_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + libm::log(logits.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
    lse - logits[target]
}

/// `exp(mean NLL)` over a set of per-token NLL values.
pub fn perplexity(nlls: &[f64]) -> f64 {
    if nlls.is_empty() {
        return f64::NAN;
    }
    libm::exp(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// Sum of NLL for next-token predictions made from logit rows
/// `score_from..` of `logits`; row `i` predicts `tokens[offset + i + 1]`.
pub fn sequence_nll(logits: &Matrix, tokens: &[u32], offset: usize, score_from: usize) -> Vec<f64> {
    (score_from..logits.rows())
        .filter(|&i| offset + i + 1 < tokens.len())
        .map(|i| token_nll(logits.row(i), tokens[offset + i + 1] as usize))
        .collect()
}

/// Median of a non-empty slice (mean of the two middle values for even
/// lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let logits = [0.0; 256];
        let nll: Vec<f64> = (0..10).map(|t| token_nll(&logits, t)).collect();
        assert!((perplexity(&nll) - 256.0).abs() < 1e-9);
    }

    #[test]
    fn mse_skips_leading_rows() {
        let a = Matrix::from_rows(&[&[5.0, 5.0], &[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(mse_from_row(&a, &b, 1).unwrap(), 2.5);
        assert!(mse_from_row(&a, &b, 2).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

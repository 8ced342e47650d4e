use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::intactkv::{attach_and_prefill, IntactKv};
use crate::model::{forward, ForwardTrace, ModelWeights};
use crate::numcore::Matrix;

/// One calibration sequence. Loss terms start at
/// `max(loss_start, prefix_len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSample {
    pub tokens: Vec<u32>,
    pub loss_start: usize,
}

impl From<Vec<u32>> for CalibSample {
    fn from(tokens: Vec<u32>) -> Self {
        Self { tokens, loss_start: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_layer: Vec<f64>,
}

/// Full-precision layer outputs restricted to the continuation, plus the
/// first continuation row that enters the loss.
#[derive(Debug, Clone)]
pub(crate) struct Reference {
    pub outputs: Vec<Matrix>,
    pub loss_row: usize,
}

pub(crate) fn check_sample(theta: &IntactKv, tokens: &[u32], loss_start: usize) -> Result<usize> {
    let m = theta.prefix_len();
    if tokens.len() <= m {
        return Err(Error::Input(format!(
            "sequence of {} tokens does not extend past the {m}-token prefix",
            tokens.len()
        )));
    }
    if tokens[..m] != *theta.prefix_tokens() {
        return Err(Error::Input("sequence does not start with the prefix tokens".into()));
    }
    let start = loss_start.max(m);
    if start >= tokens.len() {
        return Err(Error::Input(format!(
            "loss start {start} leaves no positions in a {}-token sequence",
            tokens.len()
        )));
    }
    Ok(start - m)
}

pub(crate) fn reference(fp: &ModelWeights, theta: &IntactKv, tokens: &[u32], loss_start: usize) -> Result<Reference> {
    let loss_row = check_sample(theta, tokens, loss_start)?;
    let m = theta.prefix_len();
    let trace = forward(fp, tokens)?;
    let outputs = trace
        .layer_outputs
        .iter()
        .map(|y| y.slice_rows(m, tokens.len()))
        .collect::<Result<_>>()?;
    Ok(Reference { outputs, loss_row })
}

/// `½ Σ_layers Σ_rows≥loss_row ‖y_q − y_fp‖²` split by layer.
pub(crate) fn breakdown(trace: &ForwardTrace, r: &Reference) -> LossBreakdown {
    let per_layer: Vec<f64> = trace
        .layer_outputs
        .iter()
        .zip(&r.outputs)
        .map(|(yq, yf)| {
            let from = r.loss_row * yq.cols();
            0.5 * yq.data()[from..]
                .iter()
                .zip(&yf.data()[from..])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    LossBreakdown {
        total: per_layer.iter().sum(),
        per_layer,
    }
}

pub(crate) fn loss_against(q: &ModelWeights, theta: &IntactKv, tokens: &[u32], r: &Reference) -> Result<LossBreakdown> {
    let trace = attach_and_prefill(q, theta, &tokens[theta.prefix_len()..])?;
    Ok(breakdown(&trace, r))
}

/// Layer-wise MSE objective over the positions after the prefix.
pub fn layerwise_loss(fp: &ModelWeights, q: &ModelWeights, theta: &IntactKv, tokens: &[u32]) -> Result<f64> {
    Ok(layerwise_loss_breakdown(fp, q, theta, tokens, 0)?.total)
}

pub fn layerwise_loss_breakdown(
    fp: &ModelWeights,
    q: &ModelWeights,
    theta: &IntactKv,
    tokens: &[u32],
    loss_start: usize,
) -> Result<LossBreakdown> {
    let r = reference(fp, theta, tokens, loss_start)?;
    loss_against(q, theta, tokens, &r)
}

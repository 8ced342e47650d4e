//! Pivot-token statistics from a forward trace: per-token activation
//! magnitude and head-averaged attention mass received.
//!
//! The decision rule (activation ratio to the median OR attention mass
//! ratio to uniform) is this crate's operationalization; there is no
//! canonical numeric definition of a pivot token.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::median;
use crate::model::ForwardTrace;

pub const DEFAULT_ACT_RATIO: f64 = 10.0;
pub const DEFAULT_MASS_RATIO: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PivotRow {
    pub position: usize,
    pub token_id: u32,
    pub max_abs_activation: f64,
    pub attn_mass: f64,
    pub is_pivot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PivotReport {
    pub layer: usize,
    pub rows: Vec<PivotRow>,
}

fn check_layer(trace: &ForwardTrace, layer: usize, op: &'static str) -> Result<()> {
    if layer >= trace.n_layers() {
        return Err(Error::Index {
            op,
            index: layer,
            limit: trace.n_layers(),
        });
    }
    Ok(())
}

/// Max over channels of `|hidden|` for each position of `layer`'s output.
pub fn token_activation_stats(trace: &ForwardTrace, layer: usize) -> Result<Vec<f64>> {
    check_layer(trace, layer, "token_activation_stats")?;
    let h = &trace.layer_outputs[layer];
    Ok((0..h.rows())
        .map(|t| h.row(t).iter().fold(0.0, |m: f64, v| m.max(v.abs())))
        .collect())
}

/// Attention mass received by each key position of `layer`, averaged over
/// heads and query rows: `mass_t = (1/(H·n)) Σ_h Σ_q attn[q][t]`.
///
/// Key positions cover the whole cache, so a trace with a prefix reports
/// the prefix positions too.
pub fn attention_mass(trace: &ForwardTrace, layer: usize) -> Result<Vec<f64>> {
    check_layer(trace, layer, "attention_mass")?;
    let heads = trace.n_heads();
    let first = trace.attention(layer, 0);
    let (n, total) = (first.rows(), first.cols());
    let mut mass = vec![0.0; total];
    for h in 0..heads {
        let att = trace.attention(layer, h);
        for q in 0..n {
            for (m, &a) in mass.iter_mut().zip(att.row(q)) {
                *m += a;
            }
        }
    }
    let norm = (heads * n) as f64;
    for m in &mut mass {
        *m /= norm;
    }
    Ok(mass)
}

/// Positions whose max-abs activation is at least `act_ratio` × the median,
/// or whose attention mass is at least `mass_ratio / n`, at `layer`.
pub fn detect_pivots_at(trace: &ForwardTrace, layer: usize, act_ratio: f64, mass_ratio: f64) -> Result<PivotReport> {
    let act = token_activation_stats(trace, layer)?;
    let mass = attention_mass(trace, layer)?;
    let med = median(&act);
    let uniform = 1.0 / mass.len() as f64;
    let offset = trace.start;
    let rows = act
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let m = mass[offset + i];
            PivotRow {
                position: offset + i,
                token_id: 0,
                max_abs_activation: a,
                attn_mass: m,
                is_pivot: a >= act_ratio * med || m >= mass_ratio * uniform,
            }
        })
        .collect();
    Ok(PivotReport { layer, rows })
}

/// Sorted pivot positions at the final layer.
pub fn detect_pivots(trace: &ForwardTrace, act_ratio: f64, mass_ratio: f64) -> Result<Vec<usize>> {
    let layer = trace.n_layers().saturating_sub(1);
    let report = detect_pivots_at(trace, layer, act_ratio, mass_ratio)?;
    Ok(report.rows.iter().filter(|r| r.is_pivot).map(|r| r.position).collect())
}

/// Full report with token ids filled in from `tokens`.
pub fn pivot_report(
    trace: &ForwardTrace,
    tokens: &[u32],
    layer: usize,
    act_ratio: f64,
    mass_ratio: f64,
) -> Result<PivotReport> {
    let mut report = detect_pivots_at(trace, layer, act_ratio, mass_ratio)?;
    for row in &mut report.rows {
        row.token_id = tokens.get(row.position - trace.start).copied().unwrap_or(0);
    }
    Ok(report)
}

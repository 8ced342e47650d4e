use alloc::vec::Vec;

use super::grad::loss_and_grad;
use super::loss::{loss_against, reference};
use crate::error::{Error, Result};
use crate::intactkv::IntactKv;
use crate::model::ModelWeights;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    /// Index into [`IntactKv::flatten`] order.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

/// `|a − f| / max(|a|, |f|, 1e-10)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

/// Compares the analytic prefix gradient with central differences of step
/// `h` at `n_coords` coordinates drawn without replacement from a stream
/// seeded by `seed`. Large `h` is accepted; it only degrades the check.
pub fn grad_check(
    fp: &ModelWeights,
    q: &ModelWeights,
    theta: &IntactKv,
    tokens: &[u32],
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Input("finite-difference step must be positive".into()));
    }
    if n_coords == 0 {
        return Err(Error::Input("grad_check needs at least one coordinate".into()));
    }
    let r = reference(fp, theta, tokens, 0)?;
    let analytic = loss_and_grad(q, theta, tokens, &r)?.1.flatten();
    let base = theta.flatten();

    let mut pool: Vec<usize> = (0..base.len()).collect();
    let mut rng = Rng::new(seed);
    let take = n_coords.min(pool.len());
    for i in 0..take {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }

    let mut probe = theta.clone();
    let mut flat = base.clone();
    let mut coords = Vec::with_capacity(take);
    for &index in &pool[..take] {
        flat[index] = base[index] + h;
        probe.assign_flat(&flat)?;
        let up = loss_against(q, &probe, tokens, &r)?.total;
        flat[index] = base[index] - h;
        probe.assign_flat(&flat)?;
        let down = loss_against(q, &probe, tokens, &r)?.total;
        flat[index] = base[index];
        let numeric = (up - down) / (2.0 * h);
        coords.push(CoordCheck {
            index,
            analytic: analytic[index],
            numeric,
            rel_error: relative_error(analytic[index], numeric),
        });
    }
    let max_rel_error = coords.iter().fold(0.0_f64, |m, c| m.max(c.rel_error));
    Ok(GradCheckReport { max_rel_error, coords })
}

//! Calibration of an IntactKV prefix as trainable parameters.
//!
//! The objective is the layer-wise squared error between full-precision and
//! quantized transformer-layer outputs on the positions after the prefix,
//! with the quantized branch propagating its own activations. Gradients are
//! analytic (see [`grad_intactkv`]) and checked against central
//! differences by [`grad_check`].

mod check;
mod grad;
mod loss;

pub use check::{grad_check, relative_error, CoordCheck, GradCheckReport};
pub use grad::{grad_intactkv, PrefixGrad};
pub use loss::{layerwise_loss, layerwise_loss_breakdown, CalibSample, LossBreakdown};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::intactkv::{IntactKv, Provenance};
use crate::model::ModelWeights;
use crate::rng::Rng;
use loss::{loss_against, reference, Reference};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Sequences per micro-batch; one update consumes `batch · grad_accum`.
    pub batch: usize,
    pub grad_accum: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay. Defaults to 0: pulling a lossless
    /// prefix toward zero has no meaning for this parameter.
    pub weight_decay: f64,
    pub seed: u64,
    /// Coordinates for an optional finite-difference check on the first
    /// sequence before training (0 = skip).
    pub grad_check_coords: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 20,
            batch: 1,
            grad_accum: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            grad_check_coords: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input("learning_rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be at least 1".into()));
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return Err(Error::Input("batch and grad_accum must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Input("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Input("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn updates_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch * self.grad_accum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibReport {
    /// Mean loss of each update's accumulation group, before the update.
    pub step_losses: Vec<f64>,
    /// Mean corpus loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean corpus loss of the returned prefix.
    pub final_loss: f64,
    pub initial_layer_losses: Vec<f64>,
    pub final_layer_losses: Vec<f64>,
    pub updates: usize,
    /// Epoch (1-based) whose prefix was returned; 0 means the initial one.
    pub best_epoch: usize,
    pub grad_check_max_rel_error: Option<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &CalibConfig) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(cfg.beta2, f64::from(self.t));
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let delta = cfg.learning_rate * (m_hat / (libm::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * *p);
            if delta != 0.0 {
                *p -= delta;
            }
        }
    }
}

fn corpus_loss(q: &ModelWeights, theta: &IntactKv, corpus: &[CalibSample], refs: &[Reference]) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut per_layer = vec![0.0; q.config.n_layers];
    for (s, r) in corpus.iter().zip(refs) {
        let b = loss_against(q, theta, &s.tokens, r)?;
        total += b.total;
        for (acc, v) in per_layer.iter_mut().zip(&b.per_layer) {
            *acc += v;
        }
    }
    let n = corpus.len() as f64;
    per_layer.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, per_layer))
}

/// Adam over the prefix entries only; model weights are read-only.
///
/// Each epoch visits the corpus in a seeded random order and applies one
/// update per `batch · grad_accum` sequences, averaging their gradients in
/// visit order. The returned prefix is the one with the lowest mean corpus
/// loss among the initial prefix and the end of every epoch.
pub fn calibrate(
    fp: &ModelWeights,
    q: &ModelWeights,
    theta0: &IntactKv,
    corpus: &[CalibSample],
    cfg: &CalibConfig,
) -> Result<(IntactKv, CalibReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("calibration corpus is empty".into()));
    }
    if theta0.provenance() != Provenance::Lossless {
        return Err(Error::Input(format!(
            "calibration starts from a lossless prefix, got {}",
            theta0.provenance().as_str()
        )));
    }
    let refs = corpus
        .iter()
        .map(|s| reference(fp, theta0, &s.tokens, s.loss_start))
        .collect::<Result<Vec<_>>>()?;

    let grad_check_max_rel_error = if cfg.grad_check_coords > 0 {
        let s = &corpus[0];
        Some(grad_check(fp, q, theta0, &s.tokens, cfg.grad_check_coords, 1e-5, cfg.seed)?.max_rel_error)
    } else {
        None
    };

    let (initial_loss, initial_layer_losses) = corpus_loss(q, theta0, corpus, &refs)?;
    let mut theta = theta0.clone();
    let mut params = theta.flatten();
    let mut adam = Adam::new(params.len());
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let group = cfg.batch * cfg.grad_accum;

    let mut best = (initial_loss, initial_layer_losses.clone(), params.clone(), 0usize);
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad_sum = vec![0.0; params.len()];

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(group) {
            grad_sum.fill(0.0);
            let mut loss_sum = 0.0;
            for &i in chunk {
                let (loss, grad) = grad::loss_and_grad(q, &theta, &corpus[i].tokens, &refs[i])?;
                loss_sum += loss.total;
                for (acc, g) in grad_sum.iter_mut().zip(grad.flatten()) {
                    *acc += g;
                }
            }
            let k = chunk.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g /= k);
            step_losses.push(loss_sum / k);
            adam.step(&mut params, &grad_sum, cfg);
            theta.assign_flat(&params)?;
        }
        let (loss, layers) = corpus_loss(q, &theta, corpus, &refs)?;
        if !loss.is_finite() {
            return Err(Error::Domain("calibrate"));
        }
        epoch_losses.push(loss);
        if loss < best.0 {
            best = (loss, layers, params.clone(), epoch);
        }
    }

    let (final_loss, final_layer_losses, best_params, best_epoch) = best;
    theta.assign_flat(&best_params)?;
    let report = CalibReport {
        updates: step_losses.len(),
        step_losses,
        epoch_losses,
        initial_loss,
        final_loss,
        initial_layer_losses,
        final_layer_losses,
        best_epoch,
        grad_check_max_rel_error,
    };
    Ok((theta.with_provenance(Provenance::Calibrated), report))
}

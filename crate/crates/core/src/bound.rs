//! Numerical check of the single-head attention error bound
//!
//! ```text
//! ‖Δh‖₂ ≤ C1 ‖ΔK‖₂,∞ ‖ΔV‖_F + C2 ‖ΔK‖₂,∞ + C3 ‖ΔV‖_F
//! C3 = ‖W_O‖₂,  C1 = n^{3/2}/√d · C3 · ‖q‖₂,  C2 = C1 ‖V‖₂
//! ```
//!
//! for `h = softmax(q Kᵀ/√d) V W_O`, together with its split into pivot and
//! non-pivot rows. The exponent is `n^{3/2}` (`√n` from the ∞→2 norm
//! conversion times `n` from the softmax condition number `κ(x) = n‖x‖∞`).
//! Dominance holds at every perturbation scale because softmax is
//! 1-Lipschitz in the Euclidean norm, so `‖Δs‖₂ ≤ ‖Δx‖₂ ≤ √n ‖Δx‖∞`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape, Error, Result};
use crate::numcore::{matrix_norm, softmax_in_place, vector_dot, vector_norm, Matrix, NormKind};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInstance {
    pub q: Vec<f64>,
    pub k: Matrix,
    pub v: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub w_o: Matrix,
    pub pivots: Vec<usize>,
}

impl BoundInstance {
    /// Entries i.i.d. uniform in `[-1, 1)`, perturbations scaled by `delta`.
    /// The pivot set is the first `pivot_count` rows.
    pub fn random(n: usize, d: usize, delta: f64, pivot_count: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Input(format!("bound instance needs n, d >= 1 (got n={n}, d={d})")));
        }
        if pivot_count > n {
            return Err(Error::Input(format!("pivot count {pivot_count} exceeds n={n}")));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::Input("delta must be finite and non-negative".into()));
        }
        let mut rng = Rng::new(seed);
        let mut mat = |r: usize, c: usize, s: f64| Matrix::from_fn(r, c, |_, _| s * rng.uniform(-1.0, 1.0));
        let k = mat(n, d, 1.0);
        let v = mat(n, d, 1.0);
        let w_o = mat(d, d, 1.0);
        let dk = mat(n, d, delta);
        let dv = mat(n, d, delta);
        let q = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Ok(Self {
            q,
            k,
            v,
            dk,
            dv,
            w_o,
            pivots: (0..pivot_count).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.k.rows()
    }

    pub fn d(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        if n == 0 || d == 0 {
            return Err(shape("BoundInstance", "empty instance".into()));
        }
        for (name, m, r, c) in [
            ("K", &self.k, n, d),
            ("V", &self.v, n, d),
            ("ΔK", &self.dk, n, d),
            ("ΔV", &self.dv, n, d),
            ("W_O", &self.w_o, d, d),
        ] {
            if m.rows() != r || m.cols() != c {
                return Err(shape(
                    "BoundInstance",
                    format!("{name} is {}x{}, expected {r}x{c}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::Domain("BoundInstance"));
            }
        }
        if !self.q.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("BoundInstance"));
        }
        if let Some(&p) = self.pivots.iter().find(|&&p| p >= n) {
            return Err(Error::Index {
                op: "BoundInstance",
                index: p,
                limit: n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub h: Vec<f64>,
    pub scores: Vec<f64>,
}

/// `h = softmax(q Kᵀ/√d) V W_O`.
pub fn attention_head(q: &[f64], k: &Matrix, v: &Matrix, w_o: &Matrix) -> Result<HeadOutput> {
    let d = q.len();
    if k.cols() != d || v.cols() != d || v.rows() != k.rows() || w_o.rows() != d || k.rows() == 0 {
        return Err(shape(
            "attention_head",
            format!(
                "q:{d} K:{}x{} V:{}x{} W_O:{}x{}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols(),
                w_o.rows(),
                w_o.cols()
            ),
        ));
    }
    let scale = libm::sqrt(d as f64);
    let mut scores: Vec<f64> = (0..k.rows()).map(|j| vector_dot(q, k.row(j)) / scale).collect();
    softmax_in_place(&mut scores);
    let s = Matrix::from_vec(1, scores.len(), scores.clone())?;
    let h = s.matmul(v)?.matmul(w_o)?.into_data();
    Ok(HeadOutput { h, scores })
}

/// `κ(x) = n‖x‖∞`, the relative condition-number bound of softmax.
pub fn softmax_condition_number(x: &[f64]) -> f64 {
    x.len() as f64 * x.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n: usize,
    pub d: usize,
    pub actual: f64,
    pub bound: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub dk_two_inf: f64,
    pub dv_frobenius: f64,
    pub v_spectral: f64,
    pub q_norm: f64,
    /// `κ` of the unperturbed logits `q Kᵀ/√d`.
    pub kappa: f64,
    /// `actual / bound`, or 0 when both vanish.
    pub ratio: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.actual <= self.bound
    }
}

/// Evaluates both sides of the bound on one instance.
pub fn theorem1_bound(inst: &BoundInstance) -> Result<BoundReport> {
    inst.validate()?;
    let (n, d) = (inst.n(), inst.d());
    let base = attention_head(&inst.q, &inst.k, &inst.v, &inst.w_o)?;
    let pert = attention_head(&inst.q, &inst.k.add(&inst.dk)?, &inst.v.add(&inst.dv)?, &inst.w_o)?;
    let diff: Vec<f64> = pert.h.iter().zip(&base.h).map(|(a, b)| a - b).collect();
    let actual = vector_norm(&diff);

    let c3 = matrix_norm(&inst.w_o, NormKind::Spectral)?;
    let q_norm = vector_norm(&inst.q);
    let c1 = libm::pow(n as f64, 1.5) / libm::sqrt(d as f64) * c3 * q_norm;
    let v_spectral = matrix_norm(&inst.v, NormKind::Spectral)?;
    let c2 = c1 * v_spectral;
    let dk_two_inf = matrix_norm(&inst.dk, NormKind::TwoInf)?;
    let dv_frobenius = matrix_norm(&inst.dv, NormKind::Frobenius)?;
    let bound = c1 * dk_two_inf * dv_frobenius + c2 * dk_two_inf + c3 * dv_frobenius;

    let logits: Vec<f64> = (0..n)
        .map(|j| vector_dot(&inst.q, inst.k.row(j)) / libm::sqrt(d as f64))
        .collect();
    let ratio = if bound > 0.0 { actual / bound } else { 0.0 };
    Ok(BoundReport {
        n,
        d,
        actual,
        bound,
        c1,
        c2,
        c3,
        dk_two_inf,
        dv_frobenius,
        v_spectral,
        q_norm,
        kappa: softmax_condition_number(&logits),
        ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitNorms {
    pub dk_pivot: f64,
    pub dk_rest: f64,
    pub dv_pivot: f64,
    pub dv_rest: f64,
}

impl SplitNorms {
    /// `max(‖ΔK_p‖, ‖ΔK_rest‖)`.
    pub fn dk_combined(&self) -> f64 {
        self.dk_pivot.max(self.dk_rest)
    }

    /// `sqrt(‖ΔV_p‖² + ‖ΔV_rest‖²)`.
    pub fn dv_combined(&self) -> f64 {
        libm::sqrt(self.dv_pivot * self.dv_pivot + self.dv_rest * self.dv_rest)
    }
}

/// Row-partition norms: 2→∞ for ΔK and Frobenius for ΔV, over pivot rows
/// and the remaining rows.
pub fn pivot_split_norms(dk: &Matrix, dv: &Matrix, pivots: &[usize]) -> Result<SplitNorms> {
    if dk.rows() != dv.rows() {
        return Err(shape(
            "pivot_split_norms",
            format!("ΔK has {} rows, ΔV has {}", dk.rows(), dv.rows()),
        ));
    }
    let n = dk.rows();
    let mut is_pivot = alloc::vec![false; n];
    for &p in pivots {
        if p >= n {
            return Err(Error::Index {
                op: "pivot_split_norms",
                index: p,
                limit: n,
            });
        }
        is_pivot[p] = true;
    }
    let mut out = SplitNorms {
        dk_pivot: 0.0,
        dk_rest: 0.0,
        dv_pivot: 0.0,
        dv_rest: 0.0,
    };
    let (mut dv_p, mut dv_r) = (0.0, 0.0);
    for (r, &p) in is_pivot.iter().enumerate() {
        let kn = vector_norm(dk.row(r));
        let vs = dv.row(r).iter().map(|x| x * x).sum::<f64>();
        if p {
            out.dk_pivot = out.dk_pivot.max(kn);
            dv_p += vs;
        } else {
            out.dk_rest = out.dk_rest.max(kn);
            dv_r += vs;
        }
    }
    out.dv_pivot = libm::sqrt(dv_p);
    out.dv_rest = libm::sqrt(dv_r);
    Ok(out)
}

/// Copy of `inst` with the pivot rows of ΔK and ΔV zeroed, i.e. the
/// perturbation left when the pivot tokens' cache is kept lossless.
pub fn with_lossless_pivots(inst: &BoundInstance) -> Result<BoundInstance> {
    inst.validate()?;
    let mut out = inst.clone();
    for &p in &inst.pivots {
        out.dk.row_mut(p).fill(0.0);
        out.dv.row_mut(p).fill(0.0);
    }
    Ok(out)
}

/// `(bound_with, bound_without)`: the bound after zeroing pivot-row
/// perturbations and the plain bound.
pub fn intactkv_bound_gap(inst: &BoundInstance) -> Result<(f64, f64)> {
    if inst.pivots.is_empty() {
        return Err(Error::Input("intactkv_bound_gap needs a non-empty pivot set".into()));
    }
    let without = theorem1_bound(inst)?.bound;
    let with = theorem1_bound(&with_lossless_pivots(inst)?)?.bound;
    Ok((with, without))
}

//! Training objectives with analytic gradients.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log;
//! gradients are those of the clamped function.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, UnmatchedMask};
use crate::maps::ensure_same_shape;
use crate::matching::SupervisionRecord;
use crate::scalar::Real;

pub const PROB_EPS: f64 = 1e-7;

/// Weights of the shift-learning loss (`alpha`), the joint loss (`beta`) and
/// the confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_sup: f64,
    pub alpha_sim: f64,
    pub alpha_smooth: f64,
    pub alpha_density: f64,
    pub beta_edge: f64,
    pub beta_unmatched: f64,
    pub tau: f64,
}

/// Tuned for per-pixel mean losses: the shift supervision and smoothness
/// carry more weight than the reference values and the density prior less.
impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_sup: 0.1,
            alpha_smooth: 1.0,
            alpha_density: 0.3,
            ..Self::reference()
        }
    }
}

impl LossWeights {
    /// Reference weights, calibrated for summed losses at full image scale.
    pub fn reference() -> Self {
        Self {
            alpha_sup: 0.01,
            alpha_sim: 1.0,
            alpha_smooth: 0.0,
            alpha_density: 3.0,
            beta_edge: 1.0,
            beta_unmatched: 1.0,
            tau: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_sup,
            self.alpha_sim,
            self.alpha_smooth,
            self.alpha_density,
            self.beta_edge,
            self.beta_unmatched,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[inline]
fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let lo = T::of(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

#[inline]
fn bce<T: Real>(p: T, y: T) -> T {
    let (p, _) = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// Summed, unweighted binary cross-entropy over all pixels and channels.
pub fn edge_loss<T: Real>(pred: &Array3<T>, label: &Array3<T>) -> Result<T> {
    ensure_same_shape("edge loss", label.shape(), pred.shape())?;
    Ok(Zip::from(pred).and(label).fold(T::zero(), |acc, p, y| acc + bce(*p, *y)))
}

pub fn edge_loss_grad<T: Real>(pred: &Array3<T>, label: &Array3<T>) -> Result<(T, Array3<T>)> {
    let value = edge_loss(pred, label)?;
    let grad = Zip::from(pred).and(label).map_collect(|p, y| {
        let (pc, live) = clamp_prob(*p);
        if live {
            -*y / pc + (T::one() - *y) / (T::one() - pc)
        } else {
            T::zero()
        }
    });
    Ok((value, grad))
}

/// Mean over supervised pixels of the squared shift error, both components
/// summed. Returns `None` when there is no supervision.
pub fn sup_loss<T: Real>(field: &DisplacementField<T>, records: &[SupervisionRecord]) -> Result<Option<T>> {
    Ok(sup_loss_grad(field, records)?.map(|(v, _, _)| v))
}

pub fn sup_loss_grad<T: Real>(
    field: &DisplacementField<T>,
    records: &[SupervisionRecord],
) -> Result<Option<(T, Array2<T>, Array2<T>)>> {
    if records.is_empty() {
        return Ok(None);
    }
    let (h, w) = field.shape();
    if let Some(r) = records.iter().find(|r| r.i >= h || r.j >= w) {
        return Err(Error::InvalidArgument(format!("supervision at ({}, {}) outside {h}x{w}", r.i, r.j)));
    }
    let n = T::of(records.len() as f64);
    let mut g_i = Array2::zeros((h, w));
    let mut g_j = Array2::zeros((h, w));
    let mut total = T::zero();
    for r in records {
        let (di, dj) = field.at(r.i, r.j);
        let ei = di - T::of(r.delta_i);
        let ej = dj - T::of(r.delta_j);
        total += ei * ei + ej * ej;
        g_i[[r.i, r.j]] += T::of(2.0) * ei / n;
        g_j[[r.i, r.j]] += T::of(2.0) * ej / n;
    }
    Ok(Some((total / n, g_i, g_j)))
}

/// Per-pixel mean squared error, averaged over channels.
pub fn sim_loss<T: Real>(transformed: &Array3<T>, noisy: &Array3<T>) -> Result<T> {
    ensure_same_shape("similarity loss", noisy.shape(), transformed.shape())?;
    let n = T::of(transformed.len().max(1) as f64);
    Ok(Zip::from(transformed)
        .and(noisy)
        .fold(T::zero(), |acc, a, b| acc + (*a - *b) * (*a - *b))
        / n)
}

pub fn sim_loss_grad<T: Real>(transformed: &Array3<T>, noisy: &Array3<T>) -> Result<(T, Array3<T>)> {
    let value = sim_loss(transformed, noisy)?;
    let scale = T::of(2.0) / T::of(transformed.len().max(1) as f64);
    Ok((value, Zip::from(transformed).and(noisy).map_collect(|a, b| scale * (*a - *b))))
}

/// Squared forward differences of both field components, per pixel.
pub fn smooth_loss<T: Real>(field: &DisplacementField<T>) -> T {
    smooth_loss_grad(field).0
}

pub fn smooth_loss_grad<T: Real>(field: &DisplacementField<T>) -> (T, Array2<T>, Array2<T>) {
    let (h, w) = field.shape();
    let n = T::of((h * w).max(1) as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut grads = [Array2::zeros((h, w)), Array2::zeros((h, w))];
    for (comp, grad) in [field.delta_i(), field.delta_j()].into_iter().zip(grads.iter_mut()) {
        for i in 0..h {
            for j in 0..w {
                let v = comp[[i, j]];
                if i + 1 < h {
                    let d = comp[[i + 1, j]] - v;
                    total += d * d;
                    grad[[i + 1, j]] += two * d / n;
                    grad[[i, j]] -= two * d / n;
                }
                if j + 1 < w {
                    let d = comp[[i, j + 1]] - v;
                    total += d * d;
                    grad[[i, j + 1]] += two * d / n;
                    grad[[i, j]] -= two * d / n;
                }
            }
        }
    }
    let [gi, gj] = grads;
    (total / n, gi, gj)
}

/// Component values of the shift-learning objective. `None` entries were
/// not evaluated and contribute nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PslTerms<T> {
    pub sup: Option<T>,
    pub sim: T,
    pub smooth: Option<T>,
    pub density: Option<T>,
}

pub fn psl_loss<T: Real>(terms: &PslTerms<T>, w: &LossWeights) -> T {
    let mut total = T::of(w.alpha_sim) * terms.sim;
    if let Some(v) = terms.sup {
        total += T::of(w.alpha_sup) * v;
    }
    if w.alpha_smooth > 0.0 {
        if let Some(v) = terms.smooth {
            total += T::of(w.alpha_smooth) * v;
        }
    }
    if let Some(v) = terms.density {
        total += T::of(w.alpha_density) * v;
    }
    total
}

/// Summed `-log(1 - p)` over masked pixels of every channel.
pub fn unmatched_loss<T: Real>(pred: &Array3<T>, mask: &UnmatchedMask) -> Result<T> {
    Ok(unmatched_loss_grad(pred, mask)?.0)
}

pub fn unmatched_loss_grad<T: Real>(pred: &Array3<T>, mask: &UnmatchedMask) -> Result<(T, Array3<T>)> {
    ensure_same_shape("unmatched loss", mask.mask().shape(), &pred.shape()[1..])?;
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut total = T::zero();
    for (i, j) in mask.pixels() {
        for k in 0..pred.shape()[0] {
            let (p, live) = clamp_prob(pred[[k, i, j]]);
            total -= (T::one() - p).ln();
            if live {
                grad[[k, i, j]] = T::one() / (T::one() - p);
            }
        }
    }
    Ok((total, grad))
}

pub fn joint_loss<T: Real>(edge: T, unmatched: T, w: &LossWeights) -> T {
    T::of(w.beta_edge) * edge + T::of(w.beta_unmatched) * unmatched
}

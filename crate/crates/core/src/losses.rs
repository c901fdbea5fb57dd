//! Ramp-up schedule, supervised loss (cross-entropy + soft Dice), masked
//! cross-entropy against pseudo-labels, and total-loss assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{FeatureMap, Mask3D, ProbMap};

/// Maturity weight of the uncertainty-gated teacher loss.
pub const W_UA_FINAL: f64 = 0.25;
/// Maturity weight of the nearest-neighbor losses.
pub const W_PS_FINAL: f64 = 0.125;
/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub scale: f64,
    pub total: f64,
}

impl RampSchedule {
    pub fn new(scale: f64, total: f64) -> Result<Self> {
        if !(scale >= 0.0) || !(total >= 1.0) {
            return Err(Error::invalid(format!("ramp needs scale >= 0 and total >= 1, got ({scale}, {total})")));
        }
        Ok(Self { scale, total })
    }
}

/// `s * exp(-5 (1 - T/T_N)^2)` with `T` clamped to `[0, T_N]`.
pub fn ramp_up(t: f64, sched: RampSchedule) -> f64 {
    let phase = 1.0 - t.clamp(0.0, sched.total) / sched.total;
    sched.scale * (-5.0 * phase * phase).exp()
}

/// A scalar loss and its gradient with respect to the two-class logits.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub d_logits: FeatureMap<T>,
}

#[inline]
pub(crate) fn safe_ln<T: Real>(p: T) -> T {
    p.max(T::lit(LOG_FLOOR)).ln()
}

/// Mean of `-ln p(target)` over the voxels selected by `mask` (all voxels when
/// `None`); zero with zero gradient when the selection is empty.
pub fn masked_cross_entropy<T: Real>(target: &Mask3D, probs: &ProbMap<T>, mask: Option<&Mask3D>) -> Result<LossGrad<T>> {
    let dims = probs.dims();
    if target.dims() != dims || mask.is_some_and(|m| m.dims() != dims) {
        return Err(Error::shape("cross-entropy: target, probabilities and mask must share dims"));
    }
    let n = probs.voxels();
    let selected = |v: usize| mask.is_none_or(|m| m.get(v));
    let count = (0..n).filter(|&v| selected(v)).count();
    let mut grad = vec![T::zero(); 2 * n];
    if count == 0 {
        return Ok(LossGrad {
            value: T::zero(),
            d_logits: FeatureMap::new(2, dims, grad)?,
        });
    }
    let inv = T::one() / T::lit(count as f64);
    let mut sum = T::zero();
    for v in (0..n).filter(|&v| selected(v)) {
        let c = target.get(v) as usize;
        sum -= safe_ln(probs.p(c, v));
        for class in 0..2 {
            let onehot = if class == c { T::one() } else { T::zero() };
            grad[class * n + v] = (probs.p(class, v) - onehot) * inv;
        }
    }
    Ok(LossGrad {
        value: sum * inv,
        d_logits: FeatureMap::new(2, dims, grad)?,
    })
}

/// Soft Dice loss on the foreground channel:
/// `1 - (2 sum(p1 y) + eps) / (sum(p1) + sum(y) + eps)`.
pub fn dice_loss<T: Real>(probs: &ProbMap<T>, y: &Mask3D) -> Result<LossGrad<T>> {
    if y.dims() != probs.dims() {
        return Err(Error::shape("dice: mask and probabilities must share dims"));
    }
    let n = probs.voxels();
    let eps = T::lit(DICE_EPS);
    let p1 = probs.class(1);
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut ysum = T::zero();
    for v in 0..n {
        let yv = if y.get(v) { T::one() } else { T::zero() };
        inter += p1[v] * yv;
        psum += p1[v];
        ysum += yv;
    }
    let num = T::lit(2.0) * inter + eps;
    let den = psum + ysum + eps;
    let value = T::one() - num / den;
    let mut grad = vec![T::zero(); 2 * n];
    let den2 = den * den;
    for v in 0..n {
        let yv = if y.get(v) { T::one() } else { T::zero() };
        let d_p1 = -(T::lit(2.0) * yv * den - num) / den2;
        // p1 = sigmoid(z1 - z0)
        let s = p1[v] * probs.p(0, v);
        grad[v] = -d_p1 * s;
        grad[n + v] = d_p1 * s;
    }
    Ok(LossGrad {
        value,
        d_logits: FeatureMap::new(2, probs.dims(), grad)?,
    })
}

/// Mean voxelwise cross-entropy plus soft Dice, equally weighted.
pub fn supervised_loss<T: Real>(probs: &ProbMap<T>, y: &Mask3D) -> Result<LossGrad<T>> {
    let ce = masked_cross_entropy(y, probs, None)?;
    let dice = dice_loss(probs, y)?;
    let mut d = ce.d_logits;
    for (a, &b) in d.data_mut().iter_mut().zip(dice.d_logits.data()) {
        *a += b;
    }
    Ok(LossGrad {
        value: ce.value + dice.value,
        d_logits: d,
    })
}

/// Loss terms and weights of one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_UA")]
    pub l_ua: f64,
    #[serde(rename = "L_NN")]
    pub l_nn: f64,
    #[serde(rename = "L_EN")]
    pub l_en: f64,
    #[serde(rename = "w_UA")]
    pub w_ua: f64,
    #[serde(rename = "w_PS")]
    pub w_ps: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub reliable_fraction: f64,
    #[serde(skip)]
    pub reliable_voxels: usize,
    #[serde(skip)]
    pub unreliable_voxels: usize,
}

/// Weights at iteration `t` of `t_total`.
pub fn loss_weights(t: f64, t_total: f64) -> Result<(f64, f64)> {
    let ua = RampSchedule::new(W_UA_FINAL, t_total)?;
    let ps = RampSchedule::new(W_PS_FINAL, t_total)?;
    Ok((ramp_up(t, ua), ramp_up(t, ps)))
}

/// `L = L_S + w_UA L_UA + w_PS (L_NN + L_EN)` with ramped weights.
pub fn total_loss(l_s: f64, l_ua: f64, l_nn: f64, l_en: f64, t: f64, t_total: f64) -> Result<LossReport> {
    for (name, v) in [("L_S", l_s), ("L_UA", l_ua), ("L_NN", l_nn), ("L_EN", l_en)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} is {v} at iteration {t}")));
        }
    }
    let (w_ua, w_ps) = loss_weights(t, t_total)?;
    Ok(LossReport {
        iter: t.max(0.0) as u64,
        l_s,
        l_ua,
        l_nn,
        l_en,
        w_ua,
        w_ps,
        l_total: l_s + w_ua * l_ua + w_ps * (l_nn + l_en),
        reliable_fraction: 0.0,
        reliable_voxels: 0,
        unreliable_voxels: 0,
    })
}

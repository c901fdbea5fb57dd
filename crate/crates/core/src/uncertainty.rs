//! Monte Carlo dropout entropy, the ramped reliability threshold, teacher
//! pseudo-labels and the reliability-masked teacher loss.

use rand::RngCore;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{masked_cross_entropy, ramp_up, LossGrad, RampSchedule, LOG_FLOOR};
use crate::net::{forward, Mode, NetParams};
use crate::real::Real;
use crate::rng;
use crate::volume::{add_gaussian_noise, softmax_over_classes, Field, Mask3D, ProbMap, Volume3D};

/// Teacher outputs on one unlabeled volume.
#[derive(Clone, Debug)]
pub struct McUncertainty<T = f32> {
    /// Mean per-pass predictive entropy (nats), each value in `[0, ln 2]`.
    pub entropy: Field<T>,
    /// Probabilities of the deterministic pass.
    pub probs: ProbMap<T>,
    /// `argmax` of `probs`.
    pub pseudo: Mask3D,
}

/// `-sum_c p_c ln p_c` per voxel, with `p` clamped inside the logarithm.
pub fn entropy_map<T: Real>(probs: &ProbMap<T>) -> Field<T> {
    let floor = T::lit(LOG_FLOOR);
    let (p0, p1) = (probs.class(0), probs.class(1));
    let data = p0
        .iter()
        .zip(p1)
        .map(|(&a, &b)| -(a * a.max(floor).ln() + b * b.max(floor).ln()))
        .collect();
    Field::new(probs.dims(), data).expect("dims of a valid probability map")
}

/// Mean of the per-pass entropy maps, accumulated in pass order and clamped
/// to `[0, ln 2]` against rounding.
pub fn mean_entropy<T: Real>(passes: &[ProbMap<T>]) -> Result<Field<T>> {
    let first = passes.first().ok_or_else(|| Error::invalid("need at least one pass"))?;
    let dims = first.dims();
    let mut acc = vec![T::zero(); first.voxels()];
    for p in passes {
        if p.dims() != dims {
            return Err(Error::shape("passes disagree on dims"));
        }
        for (a, h) in acc.iter_mut().zip(entropy_map(p).data()) {
            *a += *h;
        }
    }
    let inv = T::one() / T::lit(passes.len() as f64);
    let ln2 = T::lit(std::f64::consts::LN_2);
    Field::new(dims, acc.into_iter().map(|a| (a * inv).max(T::zero()).min(ln2)).collect())
}

/// Runs `m` dropout-active teacher passes on `x` with fresh input noise each,
/// then one dropout-off pass with the same noise level for the pseudo-labels.
pub fn mc_uncertainty<T: Real, R: RngCore + ?Sized>(
    teacher: &NetParams<T>,
    x: &Volume3D,
    m: usize,
    noise_sigma: f32,
    rng: &mut R,
) -> Result<McUncertainty<T>> {
    if m == 0 {
        return Err(Error::invalid("Monte Carlo pass count must be >= 1"));
    }
    let base = rng.next_u64();
    let pass = |index: usize, mode: Mode| -> Result<ProbMap<T>> {
        let mut s = rng::stream(base, &[index as u64]);
        let noisy = add_gaussian_noise(x, noise_sigma, &mut s)?;
        let trace = forward(teacher, &noisy, mode, &mut s)?;
        softmax_over_classes(&trace.logits)
    };
    let passes = (0..m)
        .into_par_iter()
        .map(|i| pass(i, Mode::McDropout))
        .collect::<Result<Vec<_>>>()?;
    let entropy = mean_entropy(&passes)?;
    let probs = pass(m, Mode::Eval)?;
    let pseudo = probs.argmax();
    Ok(McUncertainty { entropy, probs, pseudo })
}

/// `[0.75 + ramp_up(T, 0.25)] ln 2`; iterations past `t_total` clamp at maturity.
pub fn uncertainty_threshold(t: f64, t_total: f64) -> Result<f64> {
    let sched = RampSchedule::new(0.25, t_total)?;
    Ok((0.75 + ramp_up(t, sched)) * std::f64::consts::LN_2)
}

/// Splits voxels into reliable (`H < lambda`) and unreliable (`H >= lambda`).
pub fn reliability_masks<T: Real>(entropy: &Field<T>, lambda: f64) -> (Mask3D, Mask3D) {
    let reliable = Mask3D::from_fn(entropy.dims(), |i| entropy.get(i).as_f64() < lambda);
    let unreliable = reliable.complement();
    (reliable, unreliable)
}

/// Mean cross-entropy of the student against the teacher pseudo-labels over
/// the reliable voxels.
pub fn loss_ua<T: Real>(pseudo: &Mask3D, student_probs: &ProbMap<T>, reliable: &Mask3D) -> Result<LossGrad<T>> {
    masked_cross_entropy(pseudo, student_probs, Some(reliable))
}

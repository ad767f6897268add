//! Detection losses: sigmoid focal loss for classification, smooth L1 for
//! box regression, 2-bin cross-entropy for orientation, and their weighted
//! combination.
//!
//! Target/mask vectors are laid out flat in the same order as the tensor
//! data they score (channel-major, width innermost), so a kernel can walk
//! logits and targets in lockstep.

use crate::error::{Error, Result};
use crate::ops::{sigmoid_scalar, softplus};
use crate::real::Real;
use crate::tensor::Tensor4;

/// Logits are clamped to this magnitude before any log so saturated
/// predictions cannot produce non-finite loss terms.
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_bbox: f64,
    pub w_dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_bbox: 2.0,
            w_dir: 0.2,
        }
    }
}

/// Weighted sum of the three loss components.
pub fn total_loss(cls: f64, bbox: f64, dir_ce: f64, w: &LossWeights) -> f64 {
    w.w_cls * cls + w.w_bbox * bbox + w.w_dir * dir_ce
}

/// Per-logit sigmoid focal term: -alpha_t * (1 - p_t)^gamma * ln(p_t).
#[inline]
fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let p = sigmoid_scalar(z);
    if positive {
        // ln(p) = -softplus(-z)
        alpha * (1.0 - p).powf(gamma) * softplus(-z)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(z)
    }
}

/// d/dz of [`focal_term`].
#[inline]
fn focal_term_grad(z: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let p = sigmoid_scalar(z);
    if positive {
        let ln_p = -softplus(-z);
        alpha * gamma * p * (1.0 - p).powf(gamma) * ln_p - alpha * (1.0 - p).powf(gamma + 1.0)
    } else {
        let ln_q = -softplus(z); // ln(1 - p)
        (1.0 - alpha) * (p.powf(gamma + 1.0) - gamma * (1.0 - p) * p.powf(gamma) * ln_q)
    }
}

/// Sigmoid focal loss over masked logits, summed and divided by `norm`
/// (the positive-anchor count, floored at 1).
pub fn focal_loss<T: Real>(
    logits: &Tensor4<T>,
    targets: &[bool],
    mask: &[bool],
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Result<f64> {
    if targets.len() != logits.len() || mask.len() != logits.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            actual: targets.len().min(mask.len()),
        });
    }
    let mut acc = 0.0;
    for ((&z, &t), &m) in logits.data().iter().zip(targets).zip(mask) {
        if m {
            acc += focal_term(z.to_f64(), t, alpha, gamma);
        }
    }
    Ok(acc / norm)
}

pub fn focal_loss_backward<T: Real>(
    logits: &Tensor4<T>,
    targets: &[bool],
    mask: &[bool],
    alpha: f64,
    gamma: f64,
    norm: f64,
    dloss: f64,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(logits.dims());
    for (i, ((&z, &t), &m)) in logits.data().iter().zip(targets).zip(mask).enumerate() {
        if m {
            dx.data_mut()[i] =
                T::from_f64(dloss * focal_term_grad(z.to_f64(), t, alpha, gamma) / norm);
        }
    }
    dx
}

/// Smooth L1 over masked elements: 0.5*d^2/beta inside |d| < beta, else
/// |d| - 0.5*beta. Summed and divided by `norm` (the masked element count,
/// floored at 1).
pub fn smooth_l1<T: Real>(
    pred: &Tensor4<T>,
    target: &[f64],
    mask: &[bool],
    beta: f64,
    norm: f64,
) -> Result<f64> {
    if target.len() != pred.len() || mask.len() != pred.len() {
        return Err(Error::LengthMismatch {
            expected: pred.len(),
            actual: target.len().min(mask.len()),
        });
    }
    let mut acc = 0.0;
    for ((&p, &t), &m) in pred.data().iter().zip(target).zip(mask) {
        if m {
            let d = p.to_f64() - t;
            acc += if d.abs() < beta {
                0.5 * d * d / beta
            } else {
                d.abs() - 0.5 * beta
            };
        }
    }
    Ok(acc / norm)
}

pub fn smooth_l1_backward<T: Real>(
    pred: &Tensor4<T>,
    target: &[f64],
    mask: &[bool],
    beta: f64,
    norm: f64,
    dloss: f64,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(pred.dims());
    for (i, ((&p, &t), &m)) in pred.data().iter().zip(target).zip(mask).enumerate() {
        if m {
            let d = p.to_f64() - t;
            let g = if d.abs() < beta { d / beta } else { d.signum() };
            dx.data_mut()[i] = T::from_f64(dloss * g / norm);
        }
    }
    dx
}

/// 2-bin softmax cross-entropy for the orientation branch. `logits` holds
/// 2*A channels; anchor a reads channels (2a, 2a+1). `bins` and `mask` are
/// indexed per anchor element ((a*h + i)*w + j); loss is summed over masked
/// anchors and divided by `norm`.
pub fn dir_cross_entropy<T: Real>(
    logits: &Tensor4<T>,
    bins: &[u8],
    mask: &[bool],
    norm: f64,
) -> Result<f64> {
    let d = logits.dims();
    if !d.c.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!(
            "direction logits need an even channel count, got {}",
            d.c
        )));
    }
    let anchors = d.c / 2;
    let n_el = anchors * d.h * d.w;
    if bins.len() != n_el || mask.len() != n_el {
        return Err(Error::LengthMismatch {
            expected: n_el,
            actual: bins.len().min(mask.len()),
        });
    }
    let mut acc = 0.0;
    for a in 0..anchors {
        for i in 0..d.h {
            for j in 0..d.w {
                let el = (a * d.h + i) * d.w + j;
                if !mask[el] {
                    continue;
                }
                let z0 = logits.get(0, 2 * a, i, j).to_f64();
                let z1 = logits.get(0, 2 * a + 1, i, j).to_f64();
                let zt = if bins[el] == 0 { z0 } else { z1 };
                let m = z0.max(z1);
                let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                acc += lse - zt;
            }
        }
    }
    Ok(acc / norm)
}

pub fn dir_cross_entropy_backward<T: Real>(
    logits: &Tensor4<T>,
    bins: &[u8],
    mask: &[bool],
    norm: f64,
    dloss: f64,
) -> Tensor4<T> {
    let d = logits.dims();
    let anchors = d.c / 2;
    let mut dx = Tensor4::zeros(d);
    for a in 0..anchors {
        for i in 0..d.h {
            for j in 0..d.w {
                let el = (a * d.h + i) * d.w + j;
                if !mask[el] {
                    continue;
                }
                let z0 = logits.get(0, 2 * a, i, j).to_f64();
                let z1 = logits.get(0, 2 * a + 1, i, j).to_f64();
                let m = z0.max(z1);
                let e0 = (z0 - m).exp();
                let e1 = (z1 - m).exp();
                let p0 = e0 / (e0 + e1);
                let p1 = 1.0 - p0;
                let (t0, t1) = if bins[el] == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                dx.set(0, 2 * a, i, j, T::from_f64(dloss * (p0 - t0) / norm));
                dx.set(0, 2 * a + 1, i, j, T::from_f64(dloss * (p1 - t1) / norm));
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims4;

    fn logits1(z: f64) -> Tensor4<f64> {
        Tensor4::from_vec(Dims4::new(1, 1, 1, 1), vec![z]).unwrap()
    }

    #[test]
    fn focal_saturated_correct_is_zero() {
        // p_t -> 1 for a strongly positive logit on a positive target.
        let l = focal_loss(&logits1(40.0), &[true], &[true], 0.25, 2.0, 1.0).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn focal_closed_form_half() {
        // target 1, p = 0.5 (logit 0): 0.25 * 0.25 * ln 2.
        let l = focal_loss(&logits1(0.0), &[true], &[true], 0.25, 2.0, 1.0).unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!((l - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn focal_gamma_zero_is_scaled_bce() {
        // gamma = 0, alpha = 0.5 reduces to 0.5 * binary cross-entropy.
        let zs = [-2.0, -0.3, 0.0, 0.7, 3.0];
        for &z in &zs {
            for &t in &[true, false] {
                let l = focal_loss(&logits1(z), &[t], &[true], 0.5, 0.0, 1.0).unwrap();
                let p = sigmoid_scalar(z);
                let bce = if t { -p.ln() } else { -(1.0 - p).ln() };
                assert!((l - 0.5 * bce).abs() < 1e-12, "z={z} t={t}");
            }
        }
    }

    #[test]
    fn smooth_l1_branches() {
        let p = logits1(0.5);
        assert_eq!(smooth_l1(&p, &[0.5], &[true], 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&p, &[0.0], &[true], 1.0, 1.0).unwrap(), 0.125);
        let p2 = logits1(2.0);
        assert_eq!(smooth_l1(&p2, &[0.0], &[true], 1.0, 1.0).unwrap(), 1.5);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 3.2);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn dir_ce_prefers_true_bin() {
        let logits =
            Tensor4::from_vec(Dims4::new(1, 2, 1, 1), vec![2.0, -1.0]).unwrap();
        let l0 = dir_cross_entropy(&logits, &[0], &[true], 1.0).unwrap();
        let l1 = dir_cross_entropy(&logits, &[1], &[true], 1.0).unwrap();
        assert!(l0 < l1);
        // Cross-entropy of a 2-way softmax equals softplus of the logit gap.
        assert!((l0 - softplus(-3.0)).abs() < 1e-12);
        assert!((l1 - softplus(3.0)).abs() < 1e-12);
    }

    #[test]
    fn components_non_negative_and_total_zero_iff_all_zero() {
        let zs = [-3.0, -1.0, 0.0, 0.5, 2.0, 4.0];
        for &z in &zs {
            for &t in &[true, false] {
                let l = focal_loss(&logits1(z), &[t], &[true], 0.25, 2.0, 1.0).unwrap();
                assert!(l >= 0.0, "focal({z}, {t}) = {l}");
            }
            let s = smooth_l1(&logits1(z), &[0.3], &[true], 1.0, 1.0).unwrap();
            assert!(s >= 0.0);
            let logits = Tensor4::from_vec(Dims4::new(1, 2, 1, 1), vec![z, -z]).unwrap();
            assert!(dir_cross_entropy(&logits, &[0], &[true], 1.0).unwrap() >= 0.0);
        }
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!(total_loss(1e-9, 0.0, 0.0, &w) > 0.0);
        assert!(total_loss(0.0, 1e-9, 0.0, &w) > 0.0);
        assert!(total_loss(0.0, 0.0, 1e-9, &w) > 0.0);
    }

    #[test]
    fn masked_elements_do_not_contribute() {
        let logits =
            Tensor4::from_vec(Dims4::new(1, 2, 1, 1), vec![5.0, -4.0]).unwrap();
        let l = focal_loss(&logits, &[true, false], &[true, false], 0.25, 2.0, 1.0).unwrap();
        let l_only_first =
            focal_loss(&logits1(5.0), &[true], &[true], 0.25, 2.0, 1.0).unwrap();
        assert_eq!(l, l_only_first);
    }
}

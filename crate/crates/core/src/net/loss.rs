//! Per-trait losses over masked targets.
//!
//! Both losses honor [`MaskedTarget`] weights: a zero-weight trait
//! contributes nothing to the value or any gradient.

use super::NetError;
use crate::taxonomy::MaskedTarget;
use crate::tensor::Scalar;

/// Probability clamp for the cross-entropy logs.
pub const LOSS_PROB_EPS: f64 = 1e-7;

pub fn sigmoid<T: Scalar>(z: T) -> T {
    let one = T::one();
    one / (one + (-z).exp())
}

fn weight_sum<T: Scalar>(target: &MaskedTarget) -> Result<T, NetError> {
    let sum: f32 = target.weights.iter().sum();
    if sum == 0.0 {
        return Err(NetError::AllMasked);
    }
    Ok(T::from_f32(sum))
}

/// Weighted binary cross-entropy over per-trait probabilities.
///
/// `loss = -sum_k w_k [t_k ln p~_k + (1-t_k) ln(1-p~_k)] / sum_k w_k` with
/// probabilities clamped to `[eps, 1-eps]`. Returns the loss and its gradient
/// with respect to the (unclamped) probabilities; the gradient is zero where
/// the clamp is active.
pub fn cross_entropy_loss<T: Scalar>(
    probs: &[T],
    target: &MaskedTarget,
) -> Result<(T, Vec<T>), NetError> {
    assert_eq!(probs.len(), target.targets.len(), "score/target length mismatch");
    let wsum = weight_sum::<T>(target)?;
    let eps = T::from_f64(LOSS_PROB_EPS);
    let one = T::one();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); probs.len()];
    for k in 0..probs.len() {
        let w = T::from_f32(target.weights[k]);
        if w == T::zero() {
            continue;
        }
        let t = T::from_f32(target.targets[k]);
        let p = probs[k].min(one - eps).max(eps);
        loss = loss - w * (t * p.ln() + (one - t) * (one - p).ln());
        if probs[k] > eps && probs[k] < one - eps {
            grad[k] = w * (p - t) / (p * (one - p)) / wsum;
        }
    }
    Ok((loss / wsum, grad))
}

/// Chain a probability-space gradient through the sigmoid to logit space.
pub fn grad_through_sigmoid<T: Scalar>(probs: &[T], grad_probs: &[T]) -> Vec<T> {
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| g * p * (T::one() - p))
        .collect()
}

/// Weighted per-trait margin loss on pre-sigmoid scores.
///
/// `loss = sum_k w_k max(0, 1 - s_k * y_k) / sum_k w_k` with `y in {-1,+1}`.
/// The subgradient at the hinge point is 0. Returns the gradient with respect
/// to the scores.
pub fn hinge_loss<T: Scalar>(logits: &[T], target: &MaskedTarget) -> Result<(T, Vec<T>), NetError> {
    assert_eq!(logits.len(), target.targets.len(), "score/target length mismatch");
    let wsum = weight_sum::<T>(target)?;
    let one = T::one();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for k in 0..logits.len() {
        let w = T::from_f32(target.weights[k]);
        if w == T::zero() {
            continue;
        }
        let y = if target.targets[k] != 0.0 { one } else { -one };
        let margin = one - logits[k] * y;
        if margin > T::zero() {
            loss = loss + w * margin;
            grad[k] = -w * y / wsum;
        }
    }
    Ok((loss / wsum, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded::rng_for;
    use rand::Rng;

    fn masked(targets: Vec<f32>, weights: Vec<f32>) -> MaskedTarget {
        MaskedTarget { targets, weights }
    }

    #[test]
    fn ce_at_half_is_ln_two() {
        let (loss, _) = cross_entropy_loss(&[0.5f64], &masked(vec![1.0], vec![1.0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn ce_perfect_prediction_is_tiny() {
        let (loss, _) = cross_entropy_loss(
            &[1.0f64, 0.0],
            &masked(vec![1.0, 0.0], vec![1.0, 1.0]),
        )
        .unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn ce_matches_independent_scalar_formula() {
        // independent scalar re-implementation of the weighted mean
        let mut rng = rng_for(31, &[7]);
        for _ in 0..50 {
            let k = 6;
            let probs: Vec<f64> = (0..k).map(|_| 0.02 + 0.96 * rng.gen::<f64>()).collect();
            let targets: Vec<f32> = (0..k).map(|_| f32::from(rng.gen::<bool>())).collect();
            let weights: Vec<f32> = (0..k).map(|_| f32::from(rng.gen::<f64>() > 0.3)).collect();
            if weights.iter().sum::<f32>() == 0.0 {
                continue;
            }
            let (loss, _) =
                cross_entropy_loss(&probs, &masked(targets.clone(), weights.clone())).unwrap();
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..k {
                den += weights[i] as f64;
                if weights[i] != 0.0 {
                    let t = targets[i] as f64;
                    num -= t * probs[i].ln() + (1.0 - t) * (1.0 - probs[i]).ln();
                }
            }
            assert!((loss - num / den).abs() < 1e-10);
        }
    }

    #[test]
    fn ce_all_masked_is_an_error() {
        assert!(matches!(
            cross_entropy_loss(&[0.5f64], &masked(vec![1.0], vec![0.0])),
            Err(NetError::AllMasked)
        ));
    }

    #[test]
    fn hinge_reference_points() {
        // beyond the margin
        let (loss, grad) = hinge_loss(&[2.0f64], &masked(vec![1.0], vec![1.0])).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad[0], 0.0);
        // at the origin
        let (loss, grad) = hinge_loss(&[0.0f64], &masked(vec![1.0], vec![1.0])).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad[0], -1.0);
        // exactly at the hinge point: subgradient 0
        let (loss, grad) = hinge_loss(&[1.0f64], &masked(vec![1.0], vec![1.0])).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn hinge_gradient_matches_finite_difference_away_from_kink() {
        let mut rng = rng_for(32, &[7]);
        let h = 1e-6;
        for _ in 0..50 {
            let k = 5;
            let logits: Vec<f64> = (0..k).map(|_| 4.0 * (rng.gen::<f64>() - 0.5)).collect();
            let targets: Vec<f32> = (0..k).map(|_| f32::from(rng.gen::<bool>())).collect();
            let t = masked(targets, vec![1.0; k]);
            // skip draws near the kink
            if logits
                .iter()
                .zip(&t.targets)
                .any(|(&z, &tv)| (1.0 - z * if tv != 0.0 { 1.0 } else { -1.0 }).abs() < 1e-3)
            {
                continue;
            }
            let (_, grad) = hinge_loss(&logits, &t).unwrap();
            for i in 0..k {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let fd = (hinge_loss(&plus, &t).unwrap().0 - hinge_loss(&minus, &t).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-6, "fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn masked_entries_change_nothing() {
        let probs = [0.3f64, 0.8, 0.6];
        let a = masked(vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]);
        let mut b = a.clone();
        b.targets[1] = 0.0; // flip a masked target
        let (la, ga) = cross_entropy_loss(&probs, &a).unwrap();
        let (lb, gb) = cross_entropy_loss(&probs, &b).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        let (la, ga) = hinge_loss(&probs, &a).unwrap();
        let (lb, gb) = hinge_loss(&probs, &b).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }
}

//! Soft Dice loss.

use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Soft Dice loss with smoothing:
/// `DL = -(2*sum(p*t) + s) / (sum(p) + sum(t) + s)`.
///
/// For predictions in [0,1] and `s > 0` the loss lies in [-1, 0]; the
/// smoothing term keeps the empty-vs-empty case at -1 instead of 0/0.
/// Returns the loss and its exact gradient with respect to `pred`.
pub fn dice_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    smooth: S,
) -> Result<(S, Tensor<S>), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let two = S::from_f64(2.0).unwrap();
    let mut inter = S::zero();
    let mut psum = S::zero();
    let mut tsum = S::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let num = two * inter + smooth;
    let den = psum + tsum + smooth;
    let loss = -(num / den);

    // d/dp_i of -(2*I + s)/(P + T + s) = -(2*t_i*den - num) / den^2.
    let den_sq = den * den;
    let mut grad = Tensor::zeros(pred.shape());
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        *g = -(two * t * den - num) / den_sq;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_overlap_tends_to_minus_one() {
        let t = Tensor::<f64>::from_vec(&[4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let (loss, _) = dice_loss(&t, &t, 1e-9).unwrap();
        assert!((loss + 1.0).abs() < 1e-8);
    }

    #[test]
    fn all_empty_with_smoothing_is_minus_one() {
        let z = Tensor::<f64>::zeros(&[8]);
        let (loss, _) = dice_loss(&z, &z, 1.0).unwrap();
        assert_eq!(loss, -1.0);
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let pred = Tensor::<f64>::from_vec(&[4], vec![0.2, 0.9, 0.4, 0.7]).unwrap();
        let target = Tensor::from_vec(&[4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (loss, _) = dice_loss(&pred, &target, 1.0).unwrap();
        assert!((-1.0..=0.0).contains(&loss));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(&[4]);
        let b = Tensor::<f32>::zeros(&[5]);
        assert!(dice_loss(&a, &b, 1.0).is_err());
    }
}

//! Central-finite-difference gradient checker.
//!
//! This is the independent oracle for every hand-derived backward pass: it
//! never calls the backward code, only the forward closure. Run it in f64.

use super::tensor::{Tensor, TensorError};

/// Compare analytic gradients against central finite differences.
///
/// `f` evaluates the scalar loss from the current inputs; `analytic[i]` must
/// hold the claimed d(loss)/d(inputs[i]). Every coordinate of every input is
/// perturbed by ±`step`. Returns the maximum relative error
/// `|a - n| / max(1e-12, |a| + |n|)` over all coordinates.
pub fn grad_check<F>(
    mut f: F,
    inputs: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        assert_eq!(
            inputs[ti].shape(),
            analytic[ti].shape(),
            "analytic gradient shape mismatch for input {ti}"
        );
        for ci in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ci];
            inputs[ti].data_mut()[ci] = orig + step;
            let plus = f(inputs);
            inputs[ti].data_mut()[ci] = orig - step;
            let minus = f(inputs);
            inputs[ti].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_at_noise_level() {
        // loss = sum(3*x), analytic gradient 3 everywhere: exact for central
        // differences up to floating-point noise.
        let mut inputs = vec![Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
        let analytic = vec![Tensor::filled(&[4], 3.0)];
        let err = grad_check(
            |xs: &[Tensor<f64>]| xs[0].data().iter().map(|v| 3.0 * v).sum(),
            &mut inputs,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut inputs = vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()];
        let analytic = vec![Tensor::filled(&[2], 1.0)]; // true grad is 2x
        let err = grad_check(
            |xs: &[Tensor<f64>]| xs[0].data().iter().map(|v| v * v).sum(),
            &mut inputs,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        // ln turns the negative perturbation of 0 into NaN.
        let mut inputs = vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()];
        let analytic = vec![Tensor::zeros(&[1])];
        let res = grad_check(|xs: &[Tensor<f64>]| xs[0].data()[0].ln(), &mut inputs, &analytic, 1e-5);
        assert!(matches!(res, Err(TensorError::NonFinite { .. })));
    }
}

//! Seeded weight initialization.

use rand::Rng;

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Glorot-uniform init: values drawn from U(-b, b) with
/// `b = sqrt(6 / (fan_in + fan_out))`.
///
/// Values are drawn in f64 and cast afterwards, so a given seed produces the
/// same weights (up to rounding) in both scalar modes.
pub fn glorot_uniform<S: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<S> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let u: f64 = rng.gen();
            S::from_f64(-bound + u * 2.0 * bound).unwrap()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta: Tensor<f32> = glorot_uniform(&[4, 9], 9, 4, &mut a);
        let tb: Tensor<f32> = glorot_uniform(&[4, 9], 9, 4, &mut b);
        assert_eq!(ta.data(), tb.data());
        let bound = (6.0f32 / 13.0).sqrt();
        assert!(ta.data().iter().all(|v| v.abs() <= bound));
    }
}

//! Minimal CPU tensor kernels with hand-derived backward passes.
//!
//! Covers exactly what the two networks need: stride-1 odd-kernel
//! convolutions with zero padding, the deformable variant with learned
//! per-position sampling offsets, 2x2 max-pooling, stride-2 transposed
//! convolution, dense layers, ReLU/sigmoid, soft Dice loss, and two
//! optimizers. Each backward pass is validated against central finite
//! differences by [`gradcheck::grad_check`].

mod conv;
mod deform;
mod dice;
pub mod gradcheck;
mod init;
mod ops;
mod optim;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward};
pub use deform::{bilinear_sample, deform_conv2d_backward, deform_conv2d_forward, BilinearSample, TapList};
pub use dice::dice_loss;
pub use init::glorot_uniform;
pub use ops::{
    dense_backward, dense_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, transposed_conv2d_backward,
    transposed_conv2d_forward,
};
pub use optim::{Adam, MomentumSgd, Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{Tensor, TensorError};

use crate::scalar::Scalar;

/// A trainable tensor: value plus accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    /// Lossy scalar-type conversion (used to run an f32 model in f64 mode).
    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter { value: self.value.cast(), grad: self.grad.cast() }
    }
}

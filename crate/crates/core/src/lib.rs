//! Two-stage segmentation of small, low-contrast targets in CT-like volumes.
//!
//! Stage one is a Q-learning agent that iteratively zooms and shifts an
//! attention window onto the target region of a 2D slice. Stage two is an
//! encoder-decoder segmentation network with deformable convolutions in the
//! encoder, applied to the localized crop. The two stages run independently
//! on sagittal, coronal and axial slicings of a volume and the three
//! predictions are fused by per-voxel majority voting.
//!
//! Everything is built from scratch on the CPU: tensors, convolution
//! kernels and their hand-derived backward passes, the MDP environment,
//! replay memory, and the training loops. Synthetic phantom volumes with
//! known ground truth stand in for clinical data.

pub mod checkpoint;
pub mod deform_unet;
pub mod dqn;
pub mod env;
pub mod geometry;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensor_nn;

pub use scalar::Scalar;

/// Default scalar type for training and inference.
pub type Real = f32;

/// Training-precision tensor.
pub type Tensor32 = tensor_nn::Tensor<f32>;
/// Double-precision tensor, used by the finite-difference gradient checker.
pub type Tensor64 = tensor_nn::Tensor<f64>;

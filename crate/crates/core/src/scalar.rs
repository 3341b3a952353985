//! Scalar abstraction: all numerical kernels are generic over `f32`/`f64`.
//!
//! Training runs in `f32`; the gradient checker re-runs the same kernels in
//! `f64`, where central finite differences are meaningful at 1e-6 relative
//! tolerance.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` literal into the working scalar type.
#[inline]
pub fn real<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 -> scalar conversion")
}

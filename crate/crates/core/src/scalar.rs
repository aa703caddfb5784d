use std::fmt::{Debug, Display};

use ndarray::LinalgScalar;
use num_traits::Float;

/// Floating point type the network engine can run in.
///
/// Training runs in `f32`; finite-difference checks and Hessian work run in `f64`.
pub trait Scalar:
    LinalgScalar + Float + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

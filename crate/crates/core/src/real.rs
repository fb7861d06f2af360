//! Floating-point abstraction for the forward path.
//!
//! Everything that runs at inference time is generic over [`Real`] so the
//! benchmark can run in single precision. Backward passes and the gradient
//! harness are `f64` only.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Real: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

pub fn cast_slice<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

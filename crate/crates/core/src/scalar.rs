//! Scalar abstraction: all numeric kernels are generic over a real type.
//!
//! The concrete pipeline instantiates `f64` (see the crate-root aliases);
//! `f32` is supported for the math layers and exercised in tests.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar usable by tensors, solvers and kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64`, panicking only for types that cannot represent
    /// ordinary finite constants (never for `f32`/`f64`).
    fn from_f64_const(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable in scalar type")
    }

    /// Lossy widening to `f64` (exact for `f32`/`f64`).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

//! Scalar abstraction shared by every numeric module.
//!
//! All matrix code is written against [`Scalar`] so the same routines run in
//! `f64` (the working precision of the compression pipeline) and `f32` (the
//! on-disk storage precision).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Sine threshold under which a Jacobi rotation counts as converged.
    const JACOBI_TOL: f64;

    /// Lossy conversion from `f64`. Never fails for finite inputs.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f64 {
    const JACOBI_TOL: f64 = 1e-12;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const JACOBI_TOL: f64 = 1e-6;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

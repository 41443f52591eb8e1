use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type for encoders, the head, and training.
///
/// Implemented for `f32` (fast training) and `f64` (gradient checks,
/// bitwise-reproducible traces).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Tag written into checkpoints so a file is never loaded at the wrong width.
    const TYPE_TAG: &'static str;

    fn from_f64_lossy(value: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const TYPE_TAG: &'static str = "f32";

    fn from_f64_lossy(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    const TYPE_TAG: &'static str = "f64";

    fn from_f64_lossy(value: f64) -> Self {
        value
    }
}

#[inline]
pub(crate) fn cast<F: Scalar>(value: f64) -> F {
    F::from_f64_lossy(value)
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    // split on sign so neither branch overflows
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

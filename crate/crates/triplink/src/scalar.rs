//! Scalar abstraction for the numeric kernels.
//!
//! Everything that does real arithmetic (encoders, triplet loss, logistic
//! regression, cosine similarity) is generic over [`Scalar`] so the same
//! code runs in f32 or f64. The CLI and pipeline pin f64 through the type
//! aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum<Self> + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an f64 constant into the working scalar type.
///
/// Panics only if the target type cannot represent any finite f64 at all,
/// which is impossible for f32/f64 (f64 -> f32 rounds, it does not fail).
pub fn from_f64<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts to every supported scalar")
}

/// Widen the working scalar to f64 for reporting and serialization.
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("every supported scalar widens to f64")
}

pub(crate) fn dot<F: Scalar>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

pub(crate) fn l2_norm<F: Scalar>(x: &[F]) -> F {
    dot(x, x).sqrt()
}

/// Scale `x` to unit L2 norm in place. A zero vector is left untouched.
pub(crate) fn l2_normalize<F: Scalar>(x: &mut [F]) {
    let norm = l2_norm(x);
    if norm > F::zero() {
        for v in x.iter_mut() {
            *v = *v / norm;
        }
    }
}

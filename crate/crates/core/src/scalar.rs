//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type so the same code runs in 32-bit mode for training and
//! in 64-bit mode for oracle and gradient tests.

use std::fmt::{Debug, Display};

/// Floating-point element type of tensors and parameters.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the active scalar type.
#[inline]
pub fn fl<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fl_round_trips_constants() {
        assert_eq!(fl::<f64>(0.5), 0.5);
        assert_eq!(fl::<f32>(0.5), 0.5f32);
    }
}

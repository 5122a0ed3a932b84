//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`]; the crate root pins the
//! concrete working type (`f64`) through type aliases. Gradient checks and
//! the spectral oracles assume 64-bit precision, so the aliases are what the
//! model, data and harness layers use throughout.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable by every kernel in this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` literal into this scalar type.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to any Scalar")
    }

    /// Widen to `f64` (used by serialization and reporting).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar widens to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_round_trip() {
        let x: f64 = Scalar::of(0.25);
        assert_eq!(x, 0.25);
        let y: f32 = Scalar::of(0.25);
        assert_eq!(y, 0.25f32);
        assert_eq!(y.to_f64_lossy(), 0.25);
    }
}

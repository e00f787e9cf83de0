//! Scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar accepted by the loss, metric and toy-model code: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into `Self`, rounding to the nearest representable value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Lossless widening for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used when checking that a probability vector is normalized.
    ///
    /// `1e-9` for `f64`; for narrower types a few ulps per entry, since `1e-9` is below
    /// their resolution.
    fn normalization_tol(len: usize) -> Self {
        let ulps = Self::epsilon() * Self::lit(4.0 * len.max(1) as f64);
        ulps.max(Self::lit(1e-9))
    }
}

impl Real for f32 {}
impl Real for f64 {}

//! Scalar abstraction for the numeric kernels.
//!
//! Everything downstream is written against [`Real`] so the same code runs
//! in `f32` or `f64`. The crate-root aliases pin `f64`: the shipped
//! tolerances (softmax row sums to 1e-12, gradient checks to 1e-6) are
//! double-precision figures.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable by every kernel.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and configuration scalars.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 constant")
    }

    /// Widening conversion to `f64`, for reporting.
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Error function, evaluated through the positive-term series
///
/// erf(x) = (2x/sqrt(pi)) * exp(-x^2) * sum_{n>=0} (2x^2)^n / (1*3*...*(2n+1))
///
/// Every term is positive, so there is no cancellation at large |x|; the sum
/// is truncated once a term falls below machine epsilon relative to the
/// running total. For |x| > 6 the result saturates at +-1 to double
/// precision.
pub fn erf<T: Real>(x: T) -> T {
    let six = T::from_f64_lossy(6.0);
    if x.abs() > six {
        return if x > T::zero() { T::one() } else { -T::one() };
    }
    let two_x2 = T::from_f64_lossy(2.0) * x * x;
    let mut term = T::one();
    let mut sum = T::one();
    let mut odd = T::one();
    loop {
        odd += T::from_f64_lossy(2.0);
        term = term * two_x2 / odd;
        let next = sum + term;
        if next == sum {
            break;
        }
        sum = next;
    }
    let two_over_sqrt_pi = T::from_f64_lossy(std::f64::consts::FRAC_2_SQRT_PI);
    two_over_sqrt_pi * x * (-x * x).exp() * sum
}

/// Standard normal CDF, used by the GELU derivative.
pub fn norm_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + erf(x * inv_sqrt2))
}

/// Standard normal PDF.
pub fn norm_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-x * x * T::from_f64_lossy(0.5)).exp()
}

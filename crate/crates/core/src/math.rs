//! Scalar type and the handful of transcendental functions the engine needs.
//!
//! `Real` is `f64` unless the crate is built with the `f32` feature.

#[cfg(not(feature = "f32"))]
mod imp {
    pub type Real = f64;
    pub const DTYPE: &str = "f64";

    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::log(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrt(x)
    }
    #[inline]
    pub fn cos(x: Real) -> Real {
        libm::cos(x)
    }
}

#[cfg(feature = "f32")]
mod imp {
    pub type Real = f32;
    pub const DTYPE: &str = "f32";

    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::expf(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::logf(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrtf(x)
    }
    #[inline]
    pub fn cos(x: Real) -> Real {
        libm::cosf(x)
    }
}

pub use imp::*;

pub const PI: Real = core::f64::consts::PI as Real;

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[Real]) -> Real {
    let max = xs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if !max.is_finite() {
        return max;
    }
    let s: Real = xs.iter().map(|&x| exp(x - max)).sum();
    max + ln(s)
}

/// Population mean and standard deviation (divides by n).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

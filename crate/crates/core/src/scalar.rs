//! Floating-point abstraction shared by the numeric kernels.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar used by geometry, statistics and linear algebra.
///
/// Implemented for `f32` and `f64`. Storage in the archive is `f32`; every
/// pipeline stage computes in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Squared Euclidean distance between two equal-length rows.
#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Standard deviation with divisor `n - ddof`.
pub fn std_dev<T: Scalar>(xs: &[T], ddof: usize) -> T {
    if xs.len() <= ddof {
        return T::nan();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::from_usize_lossy(xs.len() - ddof)).sqrt()
}

/// Median of a non-empty slice; NaN when empty.
pub fn median<T: Scalar>(xs: &[T]) -> T {
    quantile(xs, T::half())
}

/// Linear-interpolated quantile (type 7, the numpy default).
pub fn quantile<T: Scalar>(xs: &[T], q: T) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("quantile of NaN"));
    quantile_sorted(&v, q)
}

pub fn quantile_sorted<T: Scalar>(v: &[T], q: T) -> T {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q * T::from_usize_lossy(n - 1);
    let lo = pos.floor();
    let lo_i = lo.to_usize().unwrap_or(0).min(n - 1);
    let hi_i = (lo_i + 1).min(n - 1);
    let frac = pos - lo;
    v[lo_i] + (v[hi_i] - v[lo_i]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_numpy_linear() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.5);
        assert!((quantile(&xs, 0.025) - 1.075).abs() < 1e-12);
        assert_eq!(median(&[0.3f32, 0.4, 0.5]), 0.4);
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        assert!((std_dev(&[0.0, 1.0], 1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(std_dev(&[1.0f64], 1).is_nan());
    }
}

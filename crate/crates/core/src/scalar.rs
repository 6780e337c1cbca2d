//! Numeric abstraction shared by the estimators and oracles.
//!
//! Everything that only needs field arithmetic is written against [`Scalar`],
//! so the same code runs on `f64`, `f32`, or exact rationals. Exact rationals
//! are what the enumeration reconciliations use when the science table has
//! rational entries: every identity then holds with equality instead of to a
//! tolerance.

use std::fmt::Debug;

use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Field-like scalar used by all closed-form computations.
pub trait Scalar:
    Num + Signed + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Exact conversion of a count.
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Conversion from `f64`. Exact for rationals (binary expansion), rounding for `f32`.
    fn from_f64_value(x: f64) -> Self;

    fn to_f64_value(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Square root. Exact types route through `f64`.
    fn sqrt_value(&self) -> Self;

    fn is_finite_value(&self) -> bool;
}

impl Scalar for f64 {
    fn from_f64_value(x: f64) -> Self {
        x
    }

    fn sqrt_value(&self) -> Self {
        self.sqrt()
    }

    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f32 {
    fn from_f64_value(x: f64) -> Self {
        x as f32
    }

    fn sqrt_value(&self) -> Self {
        self.sqrt()
    }

    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for BigRational {
    fn from_f64_value(x: f64) -> Self {
        BigRational::from_float(x).expect("finite value")
    }

    fn sqrt_value(&self) -> Self {
        Self::from_f64_value(self.to_f64_value().sqrt())
    }

    fn is_finite_value(&self) -> bool {
        true
    }
}

/// Neumaier-compensated sum. For exact types the compensation term stays zero.
pub fn sum<T: Scalar, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut total = T::zero();
    let mut carry = T::zero();
    for v in values {
        let t = total.clone() + v.clone();
        if total.abs() >= v.abs() {
            carry = carry + ((total - t.clone()) + v);
        } else {
            carry = carry + ((v - t.clone()) + total);
        }
        total = t;
    }
    total + carry
}

pub fn mean<T: Scalar>(values: &[T]) -> T {
    sum(values.iter().cloned()) / T::count(values.len())
}

/// Sample variance with the `len - 1` divisor. `None` for fewer than two values.
pub fn sample_variance<T: Scalar>(values: &[T]) -> Option<T> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss = sum(values.iter().map(|v| {
        let d = v.clone() - m.clone();
        d.clone() * d
    }));
    Some(ss / T::count(values.len() - 1))
}

/// Sample covariance with the `len - 1` divisor.
pub fn sample_covariance<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let s = sum(x
        .iter()
        .zip(y)
        .map(|(a, b)| (a.clone() - mx.clone()) * (b.clone() - my.clone())));
    Some(s / T::count(x.len() - 1))
}

pub fn square<T: Scalar>(x: T) -> T {
    x.clone() * x
}

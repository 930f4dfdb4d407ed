//! Floating-point scalar abstraction shared by every trainable component.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Scalar type the encoders, heads and optimizers are generic over (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to a float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in a float scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_bounded() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        for z in [-800.0, -3.0, -0.1, 0.1, 3.0, 800.0_f64] {
            let s = sigmoid(z);
            assert!((0.0..=1.0).contains(&s));
            assert!((s + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for z in [-5.0, -0.5, 0.0, 0.5, 5.0_f64] {
            assert!((softplus(z) - (1.0 + z.exp()).ln()).abs() < 1e-14);
        }
        assert!(softplus(1000.0_f64).is_finite());
    }

    #[test]
    fn softmax_sums_to_one_and_argmax_ties_go_low() {
        let p = softmax(&[1.0_f32, 2.0, 3.0, 4.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }
}

//! Numeric abstraction shared by plain evaluation and traced evaluation.
//!
//! Physics and network code is written once against [`Scalar`]. Running it
//! with `f64` gives plain numbers; running it with [`crate::autodiff::Var`]
//! records a trace that can be differentiated.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant that carries no derivative information.
    fn cst(v: f64) -> Self;

    /// Primal value.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powf(self, exponent: f64) -> Self;
    /// `max(0, x)`, with derivative 0 at exactly 0.
    fn max0(self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    /// `log2(1 + x)`.
    fn log2_1p(self) -> Self;

    /// `bias + Σ w[i]·x[i]`.
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self {
        debug_assert_eq!(w.len(), x.len());
        w.iter().zip(x).fold(bias, |acc, (&a, &b)| acc + a * b)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::cst(0.0), |acc, &x| acc + x)
    }
}

/// Inputs below this are treated as equal to it so that the result, and
/// a power cap scaled by it, stay strictly positive instead of underflowing.
pub(crate) const SIGMOID_FLOOR: f64 = -700.0;

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    let x = if x < SIGMOID_FLOOR { SIGMOID_FLOOR } else { x };
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn powf(self, exponent: f64) -> Self {
        f64::powf(self, exponent)
    }
    fn max0(self) -> Self {
        if self > 0.0 { self } else { 0.0 }
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn log2_1p(self) -> Self {
        self.ln_1p() / std::f64::consts::LN_2
    }
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = bias;
        for (a, b) in w.iter().zip(x) {
            acc += a * b;
        }
        acc
    }
    fn sum(xs: &[Self]) -> Self {
        let mut acc = 0.0;
        for x in xs {
            acc += x;
        }
        acc
    }
}

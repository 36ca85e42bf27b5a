//! Scalar abstraction so every kernel runs in 32-bit (training storage) or
//! 64-bit (verification) without duplicate code paths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Element:
    num_traits::Float + Sum<Self> + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

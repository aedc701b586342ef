//! Minimal define-by-run reverse-mode autodiff.
//!
//! Everything is built around three pieces:
//!
//! * [`Tensor`] owns parameter data plus an optional gradient slot.
//! * [`Graph`] records operations as they are executed and runs the reverse
//!   sweep. A graph is rebuilt for every training step.
//! * [`Adam`] and [`cosine_lr`] drive training.
//!
//! All reductions run sequentially in a fixed order, so identical inputs
//! always produce bit-identical outputs. The element type is generic over
//! [`Real`]; training uses `f32`, while finite-difference checks can run the
//! exact same code in `f64`.

mod check;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{cosine_lr, Adam, AdamConfig, AdamState};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type usable by the engine.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

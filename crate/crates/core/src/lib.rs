//! Lattice-free MMI sequence training and continual-learning regularizers on
//! synthetic multi-domain sequence data.
//!
//! The numerical core ([`graph`], [`fb`], [`net`], [`losses`]) is generic over
//! the scalar type through [`Real`]. The data generator, the experiment
//! harness and all on-disk formats work in `f64`; the aliases below name the
//! concrete instantiations used there.

pub mod codec;
pub mod error;
pub mod eval;
pub mod fb;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod net;
pub mod synth;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use error::{Error, GraphRole, Result};

/// Floating point scalar used throughout the numerical core.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
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
    /// Lossless-when-possible conversion from `f64`.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Matrix = matrix::Matrix<f64>;
pub type Arc = graph::Arc<f64>;
pub type Graph = graph::Graph<f64>;
pub type BigramLm = graph::BigramLm<f64>;
pub type ModelParams = net::ModelParams<f64>;
pub type ClSnapshot = losses::ClSnapshot<f64>;

pub type MatrixF32 = matrix::Matrix<f32>;
pub type GraphF32 = graph::Graph<f32>;
pub type BigramLmF32 = graph::BigramLm<f32>;
pub type ModelParamsF32 = net::ModelParams<f32>;

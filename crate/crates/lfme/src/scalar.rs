//! Scalar abstraction for the numeric core.
//!
//! Metrics, losses and schedules are generic over [`Real`] so the same code
//! runs in f32 or f64. Training pipelines pin f64 via the crate-root aliases.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

pub trait Real:
    Float + FromPrimitive + ToPrimitive + SampleUniform + Sum + Display + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("usize conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + SampleUniform
        + Sum
        + Display
        + Debug
        + Send
        + Sync
        + 'static
{
}

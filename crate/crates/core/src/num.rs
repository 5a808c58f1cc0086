//! Scalar abstraction for the statistics code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive};

/// Floating-point type the leakage statistics are evaluated in.
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Display + FromStr + Send + Sync + 'static
{
    fn from_count(v: u64) -> Self {
        <Self as FromPrimitive>::from_u64(v).expect("u64 converts to float")
    }

    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to float")
    }
}

impl Real for f32 {}
impl Real for f64 {}

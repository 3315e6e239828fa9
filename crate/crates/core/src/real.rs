//! Scalar abstraction over the two supported dtypes.

use core::fmt::{Debug, Display};
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

/// Element type tag, matching the on-disk tensor format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point scalar the engine computes in.
///
/// 64-bit is the default everywhere (finite-difference verification needs
/// the headroom); 32-bit is offered for speed runs.
pub trait Real:
    Float + NumCast + AddAssign + SubAssign + MulAssign + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> Real conversion")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Real -> f64 conversion")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

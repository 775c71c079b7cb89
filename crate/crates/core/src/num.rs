//! Scalar abstraction shared by every measured quantity in the engine.
//!
//! Durations, costs, similarities and embedding coordinates are all generic
//! over [`Scalar`] so the engine runs identically on `f32` and `f64`. The
//! crate root exports `f64` aliases for callers that don't care.

use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};

/// Floating-point scalar usable for time, cost and similarity values.
///
/// Blanket-implemented for any type with the right numeric traits; in
/// practice that means `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, saturating where the target is narrower.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::zero)
    }

    /// Converts from `usize`; token and item counts enter arithmetic here.
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).unwrap_or_else(Self::zero)
    }

    /// Converts to `f64` for reporting and serialization boundaries.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(0.0)
    }
}

impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + num_traits::NumAssign
        + Debug
        + Display
        + Default
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}

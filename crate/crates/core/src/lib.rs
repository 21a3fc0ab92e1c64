//! Distilled linearized task arithmetic at desk scale.
//!
//! A linearized teacher is trained with a curvature penalty estimated once on
//! a broad reference dataset, and a non-linear student is distilled from it
//! along the segment `θ0 → θ0 + α τ_T`. The resulting task vectors are meant to
//! compose by plain addition and negation.

pub mod arithmetic;
pub mod codec;
pub mod curvature;
pub mod error;
pub mod linearize;
pub mod metrics;
pub mod net;
pub mod stats;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};

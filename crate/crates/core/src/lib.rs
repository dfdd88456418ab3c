//! Desk-scale causal decoder lab.
//!
//! Reverse-mode tensors, a configurable pre-norm decoder family, packed token
//! streams, AdamW with per-group learning-rate multipliers and the upper-half
//! Q/K release schedule, mechanism probes, bound verification, and an
//! experiment harness that pairs control and intervention runs by seed.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod probes;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod par;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

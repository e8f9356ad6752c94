//! Cascade region proposal pipeline.
//!
//! A single square anchor per feature location is refined over several
//! stages. Every stage samples features with an adaptive convolution whose
//! taps follow that stage's input anchors, so the features stay aligned with
//! the boxes being regressed.

pub mod assign;
mod binio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

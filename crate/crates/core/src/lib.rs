//! Mixture-of-experts laboratory: expert and gate networks (softmax and
//! attentive gating), auxiliary routing losses, routing diagnostics and the
//! training protocols built on them.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod regularizers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

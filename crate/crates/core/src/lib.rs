//! Bit-exact fixed-point inference for a multi-task vision transformer with
//! mixture-of-experts blocks, plus an event-counted traffic and latency model.
//!
//! - [`fixedpoint`]: Q-formats, quantization and overflow accounting.
//! - [`approx`]: dynamic-bias streaming softmax and the GELU lookup table.
//! - [`attention`]: reordered attention schedules and their traffic.
//! - [`moe`]: gating, per-expert queues and expert-by-expert execution.
//! - [`unified_linear`]: the single linear kernel behind every layer.
//! - [`model`]: configuration, weight files and the forward pass.
//! - [`costmodel`]: closed-form traffic, load overlap and stage breakdowns.
//! - [`cli`]: the `emoe` command line.

pub mod approx;
pub mod attention;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod fixedpoint;
pub mod model;
pub mod moe;
pub mod unified_linear;

pub use error::{Error, Result};

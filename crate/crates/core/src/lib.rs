//! Multi-task flow-matching generation over latent sequences.
//!
//! A single Transformer velocity field serves time-aligned tasks (frame
//! targets expanded from per-unit durations) and non-time-aligned tasks
//! (free-length targets conditioned through cross-attention). Training uses
//! conditional flow matching with classifier-free guidance dropout; sampling
//! integrates the learned field with an Euler loop over a sway-warped grid.
//!
//! Module map:
//! - [`tensor`]: f64 tensors, reverse-mode tape, finite-difference checks
//! - [`model`]: parameters, content/instruction encoders, duration adapter,
//!   dual-fusion Transformer backbone
//! - [`flow`]: interpolation, losses, guidance, sway schedule, Euler sampler
//! - [`tasks`]: synthetic task generators, oracles, balanced sampling
//! - [`train`]: optimizer, trainer, checkpoints, evaluation, ablations
//! - [`cli`]: command-line entry points

pub mod cli;
pub mod error;
pub mod flow;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

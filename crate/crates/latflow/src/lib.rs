//! Latent flow-matching transformer for probabilistic forecasting of gridded
//! geophysical fields, with a synthetic atmosphere, a trainable patch codec,
//! ensemble rollout and verification metrics.
//!
//! See the guide under `book/` (embedded as doctests in [`docs`]) for a
//! narrative walk through each subsystem.

pub mod dit;
pub mod error;
pub mod flow;
pub mod grid;
pub mod synth;
pub mod pos;
pub mod tape;
pub mod rng;

pub use error::{Error, ErrorClass, Result};

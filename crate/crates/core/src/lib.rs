//! Numeric core, toy denoiser and DDIM sampler for block-feature caching.
//!
//! A cache step runs the full transformer stack and keeps the output of one
//! block; the reuse steps that follow feed that stored feature straight into
//! the next block, skipping the shallow part of the stack. This crate holds
//! the pieces every other crate builds on:
//!
//! * [`tensor`], [`rng`], [`dump`]: deterministic dense math, seeded
//!   sampling and the binary tensor format.
//! * [`dit`]: a small DiT-style ε-predictor with tap points and a
//!   partial-forward entry.
//! * [`diffusion`]: noise schedules, forward noising, DDIM and the sampling
//!   loop with a pluggable per-step executor.
//!
//! Scheduling, profiling and the learned policy live in the sibling crates
//! `blockdance-cache`, `blockdance-profiler` and `blockdance-policy`.

pub mod diffusion;
pub mod dit;
pub mod dump;
mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;

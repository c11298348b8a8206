//! Experiment harness around the sampler, the caching engine, the profiler
//! and the decision network. The `blockdance` binary is a thin wrapper over
//! [`cli::run`].

pub mod cli;
pub mod commands;
pub mod config;

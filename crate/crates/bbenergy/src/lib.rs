//! Live and offline energy profiling on top of `bbenergy-core`.
//!
//! The control loop in [`sampler`] stops the target, reads every thread's
//! instruction pointer, reads a [`power`] source and resumes the target at
//! each scheduled instant. Samples are written in the [`trace`] format, which
//! [`report`] turns into per-block time, power and energy estimates.

pub mod blockmap_io;
pub mod cli;
pub mod trace;
pub mod power;
pub mod report;
pub mod sampler;
pub mod scenario;

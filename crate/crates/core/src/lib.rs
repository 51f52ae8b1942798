//! Statistical core of a basic-block energy profiler.
//!
//! Samples pair the instruction pointer(s) of the profiled program with a
//! power reading taken at the same instant. From those samples this crate
//! estimates, for every basic block (or every combination of blocks running
//! concurrently on different threads), the share of execution time, the
//! mean power, the energy, and normal-approximation confidence intervals on
//! each.
//!
//! The crate is `no_std` and only needs `alloc`. IO, live sampling and file
//! formats live in the `bbenergy` crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod blockmap;
mod error;
pub mod key;
pub mod model;
pub mod power;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
pub use key::{BlockId, BlockKey, CombinationKey, ModuleId};
pub use model::{
    build_profile, BlockEstimate, ConfidenceSpec, DomainTotal, Granularity, Interval,
    PowerEstimate, Profile, ProfileOptions, SampleRecord,
};
pub use power::{PowerDomain, PowerSample, Reading};

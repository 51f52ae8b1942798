//! Time, power and energy estimators with their confidence intervals.
//!
//! Every sample is a Bernoulli trial for each block: either the block was
//! executing at the sampled tick or it was not. The share of samples that hit
//! a block therefore estimates the share of execution time it consumed, and
//! the power readings attached to those samples estimate its mean power.

mod confidence;
mod estimators;
mod profile;

pub use confidence::{normal_quantile, ConfidenceSpec};
pub use estimators::{
    energy_ci, estimate_energy, estimate_mean_power, estimate_proportion, estimate_time, power_ci,
    proportion_ci, Interval, PowerCi, ProportionCi,
};
pub use profile::{
    build_profile, unsampled_blocks, BlockEstimate, DomainTotal, Granularity, PowerEstimate,
    Profile, ProfileOptions, SampleRecord,
};

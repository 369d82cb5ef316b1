//! File formats, synthetic data, scoring and end-to-end runs.

pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod synth;

//! Library surface of the pipeline binary, shared with the integration and
//! acceptance suites.

pub mod config;
pub mod pipeline;

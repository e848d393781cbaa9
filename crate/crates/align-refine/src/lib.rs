//! IO, file formats, training orchestration, and check suites for the
//! streaming alignment-refinement decoder. The algorithms live in
//! `align-refine-core`; this crate adds everything that needs an operating
//! system.

use std::fmt;

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod rtf;
pub mod trainer;

/// Error marker for numeric failures (diverged loss, failed check suite);
/// the CLI maps it to exit code 4.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numeric failure: {}", self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<config::ConfigError>().is_some() {
        2
    } else if err.downcast_ref::<NumericFailure>().is_some() {
        4
    } else {
        3
    }
}

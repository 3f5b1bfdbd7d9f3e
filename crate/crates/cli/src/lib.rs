//! Scenario files and the commands behind the `gridcell` binary.

pub mod run;
pub mod scenario;

/// Exit status for a run that completed with rest-day substitutions.
pub const EXIT_DEGRADED: u8 = 1;
/// Exit status for configuration, data and any other failure.
pub const EXIT_ERROR: u8 = 2;

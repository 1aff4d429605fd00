//! Command-line entry point of `limitd` and its reproducible experiments.
//!
//! - [`burst`]: fixed vs rolling window admissions around a window boundary.
//! - [`memory`]: per-algorithm state size, modelled and as accounted by the engine.
//! - [`race`]: lost updates of client-side read-modify-write vs atomic scripts.
//!
//! Each experiment produces an [`ExperimentReport`] with a pass/fail verdict.

pub mod burst;
mod cli;
pub mod memory;
pub mod race;
pub mod report;

pub use cli::{exit_code, Cli, CliError, Command, EXIT_FAIL, EXIT_PASS, EXIT_USAGE};
pub use report::{ExperimentReport, OutputFormat, Provenance, ResultRow, Verdict};

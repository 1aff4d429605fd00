//! Core building blocks of the `limitd` rate limiting toolkit.
//!
//! The crate is layered bottom-up:
//!
//! - [`limiter`]: single-process token bucket, fixed window and rolling window
//!   limiters. These are pure state transitions and double as reference
//!   oracles for the store-backed limiters.
//! - [`engine`]: an embedded sorted-set store with key expiry and atomic,
//!   hash-addressed script execution.
//! - [`atomic`]: the rolling window and concurrent-request limiters expressed
//!   as atomic scripts over the engine.
//! - [`rules`]: persistent rule store, TTL'd rule cache and script bindings.

pub mod atomic;
pub mod clock;
pub mod engine;
pub mod limiter;
pub mod params;
pub mod rules;

pub use clock::{Clock, ManualClock, SystemClock};
pub use params::{Algorithm, Decision, ParamsError, RequestId, RuleParams};

//! HTTP rate limiting service over the `limitd` engine.
//!
//! [`Gateway`] answers [`CheckRequest`]s: it resolves the rules matching a
//! request's descriptors, runs each rule's atomic script and folds the
//! decisions into one [`CheckResponse`]. [`http`] exposes it over HTTP,
//! both as a check API and as middleware in front of an upstream.

pub mod http;
pub mod metrics;
mod service;

pub use http::{build_gateway, router, serve, GatewayOptions, MiddlewareConfig};
pub use metrics::GatewayMetrics;
pub use service::{
    limit_key, namespace, CheckError, CheckRequest, CheckResponse, FailPolicy, Gateway, InFlight,
    FAIL_CLOSED_RETRY_AFTER,
};

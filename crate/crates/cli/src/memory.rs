//! Per-user state size of each algorithm: the closed-form byte model, and
//! the engine's own accounting after materializing a sample population.

use std::sync::Arc;

use limitd_core::atomic::{AtomicLimiter, LimitError, LimitKey};
use limitd_core::engine::Engine;
use limitd_core::{Algorithm, ManualClock, RuleParams};

use crate::report::{ExperimentReport, Provenance, ResultRow};

pub const ALGORITHMS: [Algorithm; 4] = [
    Algorithm::TokenBucket,
    Algorithm::FixedWindow,
    Algorithm::RollingWindow,
    Algorithm::Concurrent,
];

/// Largest population materialized in the engine by default.
pub const DEFAULT_SAMPLE: u64 = 1_000;

/// Model bytes of one user's state at full occupancy: two doubles for the
/// token bucket and fixed window, one double per timestamp for the rolling
/// window, a double and an 8-byte id per in-flight request.
pub fn model_bytes_per_user(algorithm: Algorithm, limit: u64, concurrent: u64) -> u64 {
    match algorithm {
        Algorithm::TokenBucket | Algorithm::FixedWindow => 16,
        Algorithm::RollingWindow => 8 * limit,
        Algorithm::Concurrent => 16 * concurrent,
    }
}

/// Decimal megabytes, without trailing zeros.
pub fn megabytes(bytes: u64) -> String {
    format!("{} MB", bytes as f64 / 1e6)
}

/// Fills a fresh engine with `users` users at full occupancy of `algorithm`
/// and returns its logical byte count.
pub fn materialize(algorithm: Algorithm, users: u64, limit: u64, concurrent: u64) -> Result<u64, LimitError> {
    let clock = Arc::new(ManualClock::new(0.0));
    let engine = Arc::new(Engine::new(clock.clone()));
    let limiter = AtomicLimiter::with_seed(engine.clone(), 1)?;
    // A window long enough that nothing expires while filling.
    let window = 3600.0;
    let (params, checks) = match algorithm {
        Algorithm::TokenBucket => (RuleParams::token_bucket(limit as f64, 1.0), 1),
        Algorithm::FixedWindow => (RuleParams::fixed_window(window, limit), 1),
        Algorithm::RollingWindow => (RuleParams::rolling_window(window, limit), limit),
        Algorithm::Concurrent => (RuleParams::concurrent(concurrent, window), concurrent),
    };
    for user in 0..users {
        let key = match algorithm {
            Algorithm::Concurrent => LimitKey::concurrent_limiter(format!("user{user}"))?,
            _ => LimitKey::rate_limiter(format!("user{user}"))?,
        };
        for k in 0..checks {
            let now = k as f64 * 1e-3;
            clock.set(now);
            let decision = limiter.check(&key, &params, now, 1.0)?;
            debug_assert!(decision.allowed);
        }
    }
    Ok(engine.stats().logical_bytes)
}

/// Model totals for `users` users, checked against a materialized sample of
/// at most `sample` users.
pub fn memory_report(users: u64, limit: u64, concurrent: u64, sample: u64) -> Result<ExperimentReport, LimitError> {
    let sample = users.min(sample);
    let mut report = ExperimentReport::new("memory")
        .parameter("users", users)
        .parameter("limit", limit)
        .parameter("concurrent", concurrent)
        .parameter("sample_users", sample);
    for algorithm in ALGORITHMS {
        let per_user = model_bytes_per_user(algorithm, limit, concurrent);
        let total = per_user * users;
        report.rows.push(
            ResultRow::new(algorithm.as_str(), Provenance::Model)
                .metric("bytes_per_user", per_user)
                .metric("total_bytes", total)
                .metric("total", megabytes(total)),
        );
    }
    for algorithm in ALGORITHMS {
        let expected = model_bytes_per_user(algorithm, limit, concurrent) * sample;
        let measured = materialize(algorithm, sample, limit, concurrent)?;
        report.rows.push(
            ResultRow::new(format!("{}_engine", algorithm.as_str()), Provenance::Measured)
                .metric("sample_users", sample)
                .metric("logical_bytes", measured)
                .metric("model_bytes", expected),
        );
        report.require(
            measured == expected,
            format!("{} engine accounting {measured} equals model {expected}", algorithm.as_str()),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_timestamp_is_eight_bytes() {
        assert_eq!(model_bytes_per_user(Algorithm::RollingWindow, 1, 1), 8);
        let report = memory_report(1, 1, 1, DEFAULT_SAMPLE).unwrap();
        assert_eq!(report.row("rolling_window").unwrap().get("total_bytes"), Some("8"));
        assert!(report.verdict.is_pass(), "{}", report.render_text());
    }

    #[test]
    fn no_users_no_bytes() {
        let report = memory_report(0, 100, 50, DEFAULT_SAMPLE).unwrap();
        assert!(report.verdict.is_pass());
        for algorithm in ALGORITHMS {
            assert_eq!(report.row(algorithm.as_str()).unwrap().get("total_bytes"), Some("0"));
        }
    }

    #[test]
    fn megabytes_are_decimal() {
        assert_eq!(megabytes(16_000_000), "16 MB");
        assert_eq!(megabytes(800_000_000), "800 MB");
        assert_eq!(megabytes(8), "0.000008 MB");
    }
}

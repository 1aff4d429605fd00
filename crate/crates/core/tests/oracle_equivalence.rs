use std::sync::Arc;

use limitd_core::atomic::{AtomicLimiter, LimitKey};
use limitd_core::engine::Engine;
use limitd_core::limiter::{
    fixed_window_allow, rolling_window_allow, token_bucket_allow, FixedWindowState, RollingWindowState,
    TokenBucketState,
};
use limitd_core::{ManualClock, RuleParams};
use proptest::prelude::*;

fn trace(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    // Mix of same-instant repeats, short gaps and long idle periods.
    prop::collection::vec(
        prop_oneof![3 => Just(0.0), 5 => 0.0..2.0f64, 1 => 10.0..200.0f64],
        1..max_len,
    )
    .prop_map(|gaps| {
        let mut t = 0.0;
        gaps.into_iter()
            .map(|g| {
                t += g;
                t
            })
            .collect()
    })
}

fn setup() -> (Arc<ManualClock>, AtomicLimiter) {
    let clock = Arc::new(ManualClock::new(0.0));
    let engine = Arc::new(Engine::new(clock.clone()));
    (clock, AtomicLimiter::with_seed(engine, 11).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rolling_window_matches_oracle(
        times in trace(400),
        window in 1.0..120.0f64,
        max in 1u64..20,
        min_frac in prop_oneof![Just(0.0), 0.0..0.2f64],
        ttl_extra in 0.0..30.0f64,
    ) {
        let params = RuleParams::rolling_window(window, max)
            .with_min_interval(min_frac * window)
            .with_ttl(window + ttl_extra);
        let (clock, limiter) = setup();
        let key = LimitKey::rate_limiter("u1").unwrap();
        let mut state = RollingWindowState::default();
        for &t in &times {
            clock.set(t);
            let got = limiter.rolling_window_check(&key, &params, t).unwrap();
            let (want, next) = rolling_window_allow(state, &params, t).unwrap();
            state = next;
            prop_assert_eq!(got, want, "t = {}", t);
        }
    }

    #[test]
    fn fixed_window_matches_oracle(times in trace(300), window in 1.0..120.0f64, max in 1u64..20) {
        let params = RuleParams::fixed_window(window, max);
        let (clock, limiter) = setup();
        let key = LimitKey::rate_limiter("u1").unwrap();
        let mut state = FixedWindowState::default();
        for &t in &times {
            clock.set(t);
            let got = limiter.fixed_window_check(&key, &params, t).unwrap();
            let (want, next) = fixed_window_allow(state, &params, t).unwrap();
            state = next;
            prop_assert_eq!(got, want, "t = {}", t);
        }
    }

    #[test]
    fn token_bucket_matches_oracle(
        times in trace(300),
        capacity in 1.0..50.0f64,
        rate in 0.1..10.0f64,
        cost in 0.1..1.0f64,
    ) {
        let params = RuleParams::token_bucket(capacity, rate);
        let (clock, limiter) = setup();
        let key = LimitKey::rate_limiter("u1").unwrap();
        let mut state = TokenBucketState::full(&params, 0.0);
        for &t in &times {
            clock.set(t);
            let got = limiter.token_bucket_check(&key, &params, t, cost).unwrap();
            let (want, next) = token_bucket_allow(state, &params, t, cost).unwrap();
            state = next;
            prop_assert_eq!(got, want, "t = {}", t);
        }
    }
}

#[test]
fn keys_are_independent() {
    let (_, limiter) = setup();
    let params = RuleParams::rolling_window(60.0, 1);
    let a = LimitKey::rate_limiter("a").unwrap();
    let b = LimitKey::rate_limiter("b").unwrap();
    assert!(limiter.rolling_window_check(&a, &params, 0.0).unwrap().allowed);
    assert!(!limiter.rolling_window_check(&a, &params, 1.0).unwrap().allowed);
    assert!(limiter.rolling_window_check(&b, &params, 1.0).unwrap().allowed);
}

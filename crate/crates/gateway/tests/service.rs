use std::sync::Arc;

use limitd_core::engine::Engine;
use limitd_core::limiter::{
    fixed_window_allow, rolling_window_allow, token_bucket_allow, FixedWindowState, RollingWindowState,
    TokenBucketState,
};
use limitd_core::rules::{RuleManager, RuleStore};
use limitd_core::{Algorithm, Decision, ManualClock, RuleParams};
use limitd_gateway::{limit_key, CheckRequest, FailPolicy, Gateway, FAIL_CLOSED_RETRY_AFTER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gateway_on(engine: Arc<Engine>, clock: Arc<ManualClock>, doc: &str, policy: FailPolicy) -> Gateway {
    let rules = RuleManager::new(engine, RuleStore::in_memory(), clock);
    rules.load_rules(doc).unwrap();
    Gateway::new(rules, policy).unwrap()
}

fn gateway(doc: &str) -> (Arc<ManualClock>, Gateway) {
    let clock = Arc::new(ManualClock::new(0.0));
    let engine = Arc::new(Engine::new(clock.clone()));
    (clock.clone(), gateway_on(engine, clock, doc, FailPolicy::FailOpen))
}

fn single_rule(algorithm: &str, unit: &str, limit: u64) -> String {
    format!(
        "domain: api\ndescriptors:\n  - key: user_id\n    algorithm: {algorithm}\n    rate_limit: {{unit: {unit}, requests_per_unit: {limit}}}\n"
    )
}

/// Sorted arrival times: bursts, short gaps and idle stretches.
fn trace(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    let mut t = 0.0;
    (0..len)
        .map(|_| {
            t += match rng.random_range(0..10) {
                0..=2 => 0.0,
                3..=8 => rng.random_range(0.0..0.1 * scale),
                _ => rng.random_range(0.5 * scale..2.0 * scale),
            };
            t
        })
        .collect()
}

fn user(u: &str) -> CheckRequest {
    CheckRequest::new("api").descriptor("user_id", u)
}

/// Limiter-core transition for any state-machine algorithm.
enum Oracle {
    Rolling(RollingWindowState),
    Fixed(FixedWindowState),
    Bucket(TokenBucketState),
}

impl Oracle {
    fn new(params: &RuleParams) -> Self {
        match params.algorithm {
            Algorithm::RollingWindow => Oracle::Rolling(Default::default()),
            Algorithm::FixedWindow => Oracle::Fixed(Default::default()),
            Algorithm::TokenBucket => Oracle::Bucket(TokenBucketState::full(params, 0.0)),
            Algorithm::Concurrent => unreachable!("concurrent has no single-process oracle"),
        }
    }

    fn allow(&mut self, params: &RuleParams, now: f64) -> Decision {
        match self {
            Oracle::Rolling(s) => {
                let (d, next) = rolling_window_allow(std::mem::take(s), params, now).unwrap();
                *s = next;
                d
            }
            Oracle::Fixed(s) => {
                let (d, next) = fixed_window_allow(*s, params, now).unwrap();
                *s = next;
                d
            }
            Oracle::Bucket(s) => {
                let (d, next) = token_bucket_allow(*s, params, now, 1.0).unwrap();
                *s = next;
                d
            }
        }
    }
}

#[test]
fn single_rule_replay_matches_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for algorithm in ["rolling_window", "fixed_window", "token_bucket"] {
        for (unit, scale) in [("second", 1.0), ("minute", 60.0)] {
            let limit = rng.random_range(1..12);
            let (clock, gw) = gateway(&single_rule(algorithm, unit, limit));
            let params = gw.rules().get_rule("api", "user_id").unwrap().params();
            let mut oracle = Oracle::new(&params);
            let mut admitted = 0;
            for t in trace(&mut rng, 2000, scale) {
                clock.set(t);
                let got = gw.handle_check(&user("u1"), t).unwrap();
                let want = oracle.allow(&params, t);
                assert_eq!(got.allowed, want.allowed, "{algorithm} t={t}");
                assert_eq!(got.remaining, want.remaining.min(limit), "{algorithm} t={t}");
                assert_eq!(got.retry_after, want.retry_after, "{algorithm} t={t}");
                assert!(got.remaining <= got.limit);
                assert_eq!(got.retry_after.is_some(), !got.allowed);
                admitted += u64::from(got.allowed);
            }
            assert!(admitted > 0 && admitted < 2000, "{algorithm}: {admitted}");
        }
    }
}

#[test]
fn instances_sharing_an_engine_behave_as_one() {
    let doc = "domain: api\ndescriptors:\n  - key: user_id\n    rate_limit: {unit: second, requests_per_unit: 4}\n  - key: ip\n    algorithm: fixed_window\n    rate_limit: {unit: second, requests_per_unit: 6}\n";
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let times = trace(&mut rng, 3000, 1.0);
    let requests: Vec<CheckRequest> = times
        .iter()
        .map(|_| {
            CheckRequest::new("api")
                .descriptor("user_id", format!("u{}", rng.random_range(0..3)))
                .descriptor("ip", format!("10.0.0.{}", rng.random_range(0..2)))
        })
        .collect();
    let sides: Vec<bool> = times.iter().map(|_| rng.random_bool(0.5)).collect();

    let clock = Arc::new(ManualClock::new(0.0));
    let shared = Arc::new(Engine::new(clock.clone()));
    let a = gateway_on(shared.clone(), clock.clone(), doc, FailPolicy::FailOpen);
    let b = gateway_on(shared, clock.clone(), doc, FailPolicy::FailOpen);
    let (solo_clock, solo) = gateway(doc);

    for ((t, request), side) in times.iter().zip(&requests).zip(&sides) {
        clock.set(*t);
        solo_clock.set(*t);
        let instance = if *side { &a } else { &b };
        let split = instance.handle_check(request, *t).unwrap();
        let merged = solo.handle_check(request, *t).unwrap();
        assert_eq!(split, merged, "t={t}");
    }
}

#[test]
fn denial_short_circuits_later_rules() {
    // "api.ip" sorts before "api.user_id" and is the stricter rule.
    let doc = "domain: api\ndescriptors:\n  - key: user_id\n    rate_limit: {unit: minute, requests_per_unit: 10}\n  - key: ip\n    rate_limit: {unit: minute, requests_per_unit: 2}\n";
    let (_, gw) = gateway(doc);
    let request = user("u1").descriptor("ip", "10.0.0.1");
    let loose = gw.rules().get_rule_by_id("api.user_id").unwrap();
    let loose_key = limit_key(&loose, "u1").unwrap().render();
    let loose_count = || gw.engine().z_card(loose_key.as_bytes()).unwrap();

    for i in 0..2 {
        let r = gw.handle_check(&request, i as f64).unwrap();
        assert!(r.allowed);
        // Both rules consumed; the tighter one is reported.
        assert_eq!(r.matched_rule.as_deref(), Some("api.ip"));
        assert_eq!(r.remaining, 1 - i);
    }
    assert_eq!(loose_count(), 2);
    for i in 2..8 {
        let r = gw.handle_check(&request, i as f64).unwrap();
        assert!(!r.allowed);
        assert_eq!(r.matched_rule.as_deref(), Some("api.ip"));
        assert!(r.retry_after.unwrap() > 0.0);
    }
    assert_eq!(loose_count(), 2, "denied requests must not consume the looser rule");
    assert_eq!(gw.metrics().denied_total("api", "ip"), 6);
    assert_eq!(gw.metrics().allowed_total("api", "user_id"), 2);
    assert_eq!(gw.metrics().denied_total("api", "user_id"), 0);

    // The looser rule still admits other IPs for the same user.
    let other_ip = user("u1").descriptor("ip", "10.0.0.2");
    assert!(gw.handle_check(&other_ip, 9.0).unwrap().allowed);
    assert_eq!(loose_count(), 3);
}

#[test]
fn a_later_denial_keeps_earlier_charges() {
    // "api.a" is loose and evaluated first; "api.b" denies.
    let doc = "domain: api\ndescriptors:\n  - key: a\n    rate_limit: {unit: minute, requests_per_unit: 10}\n  - key: b\n    rate_limit: {unit: minute, requests_per_unit: 1}\n";
    let (_, gw) = gateway(doc);
    let request = CheckRequest::new("api").descriptor("a", "x").descriptor("b", "y");
    assert!(gw.handle_check(&request, 0.0).unwrap().allowed);
    let denied = gw.handle_check(&request, 1.0).unwrap();
    assert!(!denied.allowed);
    assert_eq!(denied.matched_rule.as_deref(), Some("api.b"));
    let a = gw.rules().get_rule_by_id("api.a").unwrap();
    let key = limit_key(&a, "x").unwrap().render();
    assert_eq!(gw.engine().z_card(key.as_bytes()).unwrap(), 2);
}

#[test]
fn unmatched_requests_pass_through() {
    let (_, gw) = gateway(&single_rule("rolling_window", "second", 1));
    for t in 0..5 {
        let r = gw.handle_check(&CheckRequest::new("api").descriptor("tenant", "t1"), t as f64).unwrap();
        assert!(r.allowed);
        assert_eq!(r.matched_rule, None);
        assert_eq!(r.retry_after, None);
        let other = gw.handle_check(&CheckRequest::new("other").descriptor("user_id", "u1"), t as f64).unwrap();
        assert_eq!(other.matched_rule, None);
    }
    assert!(gw.handle_check(&CheckRequest::new("api"), 0.0).is_err());
    assert!(gw.handle_check(&user("u1").with_cost(0), 0.0).is_err());
}

#[test]
fn at_limit_user_is_denied_and_counted() {
    let (_, gw) = gateway(&single_rule("rolling_window", "minute", 3));
    for t in 0..3 {
        assert!(gw.handle_check(&user("u1"), t as f64).unwrap().allowed);
    }
    let denied = gw.handle_check(&user("u1"), 3.0).unwrap();
    assert!(!denied.allowed);
    assert_eq!(denied.remaining, 0);
    assert!((denied.retry_after.unwrap() - 57.0).abs() < 1e-9);
    assert_eq!(gw.metrics().allowed_total("api", "user_id"), 3);
    assert_eq!(gw.metrics().denied_total("api", "user_id"), 1);
    assert_eq!(gw.metrics().checks_timed(), 4);
}

#[test]
fn store_outage_follows_the_fail_policy() {
    let doc = single_rule("rolling_window", "second", 1);
    for policy in [FailPolicy::FailOpen, FailPolicy::FailClosed] {
        let clock = Arc::new(ManualClock::new(0.0));
        let engine = Arc::new(Engine::new(clock.clone()));
        let gw = gateway_on(engine.clone(), clock, &doc, policy);
        engine.set_available(false);
        for t in 0..3 {
            let r = gw.handle_check(&user("u1"), t as f64).unwrap();
            assert!(r.degraded);
            assert_eq!(r.allowed, policy == FailPolicy::FailOpen);
            assert_eq!(r.retry_after.is_some(), !r.allowed);
            if !r.allowed {
                assert_eq!(r.retry_after, Some(FAIL_CLOSED_RETRY_AFTER));
            }
        }
        assert_eq!(gw.metrics().store_errors(), 3);
        engine.set_available(true);
        let r = gw.handle_check(&user("u1"), 3.0).unwrap();
        assert!(r.allowed && !r.degraded);
    }
}

#[test]
fn concurrent_slots_are_held_until_completed() {
    let doc = "domain: api\ndescriptors:\n  - key: user_id\n    algorithm: concurrent\n    rate_limit: {unit: minute, requests_per_unit: 2}\n";
    let (_, gw) = gateway(doc);
    let first = gw.handle_check(&user("u1"), 0.0).unwrap();
    let second = gw.handle_check(&user("u1"), 0.1).unwrap();
    assert!(first.allowed && second.allowed);
    assert_eq!(first.in_flight.len(), 1);
    assert!(!gw.handle_check(&user("u1"), 0.2).unwrap().allowed);
    assert!(gw.complete(&first.in_flight[0]).unwrap());
    assert!(!gw.complete(&first.in_flight[0]).unwrap());
    assert!(gw.handle_check(&user("u1"), 0.3).unwrap().allowed);
}

#[test]
fn overall_denial_releases_concurrent_slots() {
    // "api.a" holds a concurrency slot, "api.b" then denies.
    let doc = "domain: api\ndescriptors:\n  - key: a\n    algorithm: concurrent\n    rate_limit: {unit: minute, requests_per_unit: 1}\n  - key: b\n    rate_limit: {unit: minute, requests_per_unit: 1}\n";
    let (_, gw) = gateway(doc);
    let request = CheckRequest::new("api").descriptor("a", "x").descriptor("b", "y");
    let first = gw.handle_check(&request, 0.0).unwrap();
    assert!(first.allowed);
    gw.complete(&first.in_flight[0]).unwrap();
    assert!(!gw.handle_check(&request, 1.0).unwrap().allowed);
    // The slot taken by the denied request was returned.
    let only_a = CheckRequest::new("api").descriptor("a", "x");
    assert!(gw.handle_check(&only_a, 2.0).unwrap().allowed);
}

#[test]
fn rule_update_switches_enforcement_at_the_update_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (clock, gw) = gateway(&single_rule("rolling_window", "second", 5));
        let mut params = gw.rules().get_rule("api", "user_id").unwrap().params();
        let mut oracle = Oracle::new(&params);
        let times = trace(&mut rng, 400, 1.0);
        let switch = rng.random_range(50..350);
        let new_limit = rng.random_range(1..10);
        for (i, &t) in times.iter().enumerate() {
            clock.set(t);
            if i == switch {
                let mut rule = gw.rules().get_rule_by_id("api.user_id").unwrap();
                rule.requests_per_unit = new_limit;
                let version = gw.rules().update_rule(rule.clone()).unwrap();
                assert_eq!(version, rule.version + 1);
                params = rule.params();
                assert_eq!(gw.rules().get_rule("api", "user_id").unwrap().version, version);
            }
            let got = gw.handle_check(&user("u1"), t).unwrap();
            let want = oracle.allow(&params, t);
            assert_eq!(got.allowed, want.allowed, "i={i} switch={switch}");
        }
    }
}

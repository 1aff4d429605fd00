//! Limiters that run as atomic scripts inside an [`Engine`].
//!
//! Every check is one `eval_by_hash` call, so cleanup, counting and insertion
//! happen with no other command interleaved. Rule parameters travel as
//! rendered decimal arguments; the scripts themselves are rule-agnostic.

use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::engine::{
    arg_bytes, arg_f64, arg_u64, key_arg, render_score, Engine, EngineError, Keyspace, ScriptCatalog, ScriptHash,
    ScriptValue,
};
use crate::limiter::{self, FixedWindowState, TokenBucketState};
use crate::params::{Algorithm, Decision, ParamsError, RequestId, RuleParams};

pub const ROLLING_WINDOW_SCRIPT: &str = "limitd.rolling_window.v1";
pub const CONCURRENT_SCRIPT: &str = "limitd.concurrent.v1";
pub const TOKEN_BUCKET_SCRIPT: &str = "limitd.token_bucket.v1";
pub const FIXED_WINDOW_SCRIPT: &str = "limitd.fixed_window.v1";
pub const COUNTER_INCR_SCRIPT: &str = "limitd.counter_incr.v1";

/// Catalog identifier of the script enforcing `algorithm`.
pub fn script_for(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::RollingWindow => ROLLING_WINDOW_SCRIPT,
        Algorithm::Concurrent => CONCURRENT_SCRIPT,
        Algorithm::TokenBucket => TOKEN_BUCKET_SCRIPT,
        Algorithm::FixedWindow => FIXED_WINDOW_SCRIPT,
    }
}

/// Ordered argument names each script expects.
pub fn argument_template(algorithm: Algorithm) -> &'static [&'static str] {
    match algorithm {
        Algorithm::RollingWindow => &["window_size", "max_requests", "min_interval", "ttl", "now", "suffix", "count_rejected"],
        Algorithm::Concurrent => &["window_size", "max_concurrent", "ttl", "now", "request_id"],
        Algorithm::TokenBucket => &["capacity", "refill_rate", "ttl", "now", "cost"],
        Algorithm::FixedWindow => &["window_size", "max_requests", "ttl", "now"],
    }
}

// Reply layout shared by the limiter scripts:
// [status, remaining, retry_after | nil, member | nil]
const STATUS_DENIED: i64 = 0;
const STATUS_ALLOWED: i64 = 1;
/// The generated member already exists; retry with a fresh one.
const STATUS_DUPLICATE: i64 = -1;

fn reply(status: i64, remaining: u64, retry_after: Option<f64>, member: Option<Vec<u8>>) -> ScriptValue {
    ScriptValue::Array(vec![
        ScriptValue::Int(status),
        ScriptValue::Int(remaining as i64),
        retry_after.map_or(ScriptValue::Nil, ScriptValue::Float),
        member.map_or(ScriptValue::Nil, ScriptValue::Bytes),
    ])
}

fn rolling_window_script(ks: &mut Keyspace, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
    let key = key_arg(keys, 0)?;
    let window = arg_f64(args, 0, "window_size")?;
    let max = arg_u64(args, 1, "max_requests")?;
    let min_interval = arg_f64(args, 2, "min_interval")?;
    let ttl = arg_f64(args, 3, "ttl")?;
    let now = arg_f64(args, 4, "now")?;
    let suffix = arg_bytes(args, 5, "suffix")?;
    let count_rejected = args.get(6).is_some_and(|a| a.as_slice() == b"1");

    ks.z_rem_range_by_score(key, f64::NEG_INFINITY, now - window)?;
    let count = ks.z_card(key)?;

    let denial = if count >= max {
        let oldest = ks.z_range_with_scores(key, 0, 0)?.first().map_or(now, |(_, s)| *s);
        Some((0, oldest + window - now))
    } else {
        match ks.z_rev_range_with_scores(key, 0, 0)?.first() {
            Some(&(_, last)) if now - last < min_interval => Some((max - count, last + min_interval - now)),
            _ => None,
        }
    };

    if let Some((remaining, retry_after)) = denial {
        if count_rejected && ks.z_add_stamp(key, now, suffix)?.is_some() {
            ks.expire(key, ttl)?;
        }
        return Ok(reply(STATUS_DENIED, remaining, Some(retry_after), None));
    }

    let Some(member) = ks.z_add_stamp(key, now, suffix)? else {
        return Ok(reply(STATUS_DUPLICATE, 0, None, None));
    };
    ks.expire(key, ttl)?;
    Ok(reply(STATUS_ALLOWED, max - count - 1, None, Some(member)))
}

fn concurrent_script(ks: &mut Keyspace, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
    let key = key_arg(keys, 0)?;
    let window = arg_f64(args, 0, "window_size")?;
    let max = arg_u64(args, 1, "max_concurrent")?;
    let ttl = arg_f64(args, 2, "ttl")?;
    let now = arg_f64(args, 3, "now")?;
    let request_id = arg_bytes(args, 4, "request_id")?;

    ks.z_rem_range_by_score(key, f64::NEG_INFINITY, now - window)?;
    let count = ks.z_card(key)?;
    if count >= max {
        let oldest = ks.z_range_with_scores(key, 0, 0)?.first().map_or(now, |(_, s)| *s);
        return Ok(reply(STATUS_DENIED, 0, Some(oldest + window - now), None));
    }
    // A colliding id must not re-score the request already holding it.
    if ks.z_score(key, request_id)?.is_some() {
        return Ok(reply(STATUS_DUPLICATE, 0, None, None));
    }
    ks.z_add(key, now, request_id)?;
    ks.expire(key, ttl)?;
    Ok(reply(STATUS_ALLOWED, max - count - 1, None, Some(request_id.to_vec())))
}

fn token_bucket_script(ks: &mut Keyspace, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
    let key = key_arg(keys, 0)?;
    let capacity = arg_f64(args, 0, "capacity")?;
    let rate = arg_f64(args, 1, "refill_rate")?;
    let ttl = arg_f64(args, 2, "ttl")?;
    let now = arg_f64(args, 3, "now")?;
    let cost = arg_f64(args, 4, "cost")?;

    let params = RuleParams::token_bucket(capacity, rate);
    let state = match (ks.h_get(key, b"tokens")?, ks.h_get(key, b"last_refill")?) {
        (Some(tokens), Some(last_refill)) => TokenBucketState { tokens, last_refill },
        _ => TokenBucketState::full(&params, now),
    };
    let (decision, next) =
        limiter::token_bucket_allow(state, &params, now, cost).map_err(|e| EngineError::Script(e.to_string()))?;
    ks.h_set(key, b"tokens", next.tokens)?;
    ks.h_set(key, b"last_refill", next.last_refill)?;
    // After capacity / rate idle seconds a missing bucket equals a full one.
    ks.expire(key, ttl.max(capacity / rate))?;
    Ok(decision_reply(&decision))
}

fn fixed_window_script(ks: &mut Keyspace, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
    let key = key_arg(keys, 0)?;
    let window = arg_f64(args, 0, "window_size")?;
    let max = arg_u64(args, 1, "max_requests")?;
    let ttl = arg_f64(args, 2, "ttl")?;
    let now = arg_f64(args, 3, "now")?;

    let params = RuleParams::fixed_window(window, max).with_ttl(ttl.max(window));
    let state = match (ks.h_get(key, b"count")?, ks.h_get(key, b"window_start")?) {
        (Some(count), Some(window_start)) => FixedWindowState {
            count: count as u64,
            window_start,
        },
        _ => FixedWindowState {
            count: 0,
            window_start: limiter::window_start(now, window),
        },
    };
    let (decision, next) = limiter::fixed_window_allow(state, &params, now).map_err(|e| EngineError::Script(e.to_string()))?;
    ks.h_set(key, b"count", next.count as f64)?;
    ks.h_set(key, b"window_start", next.window_start)?;
    ks.expire(key, params.ttl)?;
    Ok(decision_reply(&decision))
}

fn counter_incr_script(ks: &mut Keyspace, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
    let key = key_arg(keys, 0)?;
    let delta = arg_f64(args, 0, "delta")?;
    let value = ks.get_number(key)?.unwrap_or(0.0) + delta;
    ks.set_number(key, value)?;
    Ok(ScriptValue::Float(value))
}

fn decision_reply(decision: &Decision) -> ScriptValue {
    let status = if decision.allowed { STATUS_ALLOWED } else { STATUS_DENIED };
    reply(status, decision.remaining, decision.retry_after, None)
}

/// The procedures every engine ships with.
pub fn builtin_catalog() -> ScriptCatalog {
    let mut catalog = ScriptCatalog::new();
    catalog.register(ROLLING_WINDOW_SCRIPT, Arc::new(rolling_window_script));
    catalog.register(CONCURRENT_SCRIPT, Arc::new(concurrent_script));
    catalog.register(TOKEN_BUCKET_SCRIPT, Arc::new(token_bucket_script));
    catalog.register(FIXED_WINDOW_SCRIPT, Arc::new(fixed_window_script));
    catalog.register(COUNTER_INCR_SCRIPT, Arc::new(counter_incr_script));
    catalog
}

/// Namespaced store key of one limited subject, rendered `namespace:discriminator`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LimitKey {
    namespace: String,
    discriminator: String,
}

impl LimitKey {
    pub const RATE_LIMITER: &'static str = "rate_limiter";
    pub const CONCURRENT_LIMITER: &'static str = "concurrent_limiter";

    pub fn new(namespace: impl Into<String>, discriminator: impl Into<String>) -> Result<Self, LimitError> {
        let discriminator = discriminator.into();
        if discriminator.is_empty() {
            return Err(LimitError::EmptyDiscriminator);
        }
        Ok(Self {
            namespace: namespace.into(),
            discriminator,
        })
    }

    pub fn rate_limiter(discriminator: impl Into<String>) -> Result<Self, LimitError> {
        Self::new(Self::RATE_LIMITER, discriminator)
    }

    pub fn concurrent_limiter(discriminator: impl Into<String>) -> Result<Self, LimitError> {
        Self::new(Self::CONCURRENT_LIMITER, discriminator)
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn discriminator(&self) -> &str {
        &self.discriminator
    }

    pub fn render(&self) -> String {
        format!("{}:{}", self.namespace, self.discriminator)
    }
}

impl fmt::Display for LimitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.discriminator)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("rule uses {actual}, this check needs {expected}")]
    AlgorithmMismatch { expected: Algorithm, actual: Algorithm },
    #[error("limit key discriminator must not be empty")]
    EmptyDiscriminator,
    #[error("malformed script reply: {0:?}")]
    BadReply(ScriptValue),
    #[error("could not generate a unique member after {0} attempts")]
    Collision(usize),
}

/// Error from [`AtomicLimiter::do_request`].
#[derive(Debug, Error)]
pub enum DoRequestError<E> {
    #[error("rate limit exceeded, retry after {retry_after:?} s")]
    RateLimited { retry_after: Option<f64> },
    #[error(transparent)]
    Limiter(LimitError),
    #[error("request action failed")]
    Action(E),
}

/// A prepared script invocation: enough to run it on any engine, or to
/// replay it on a replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptCall {
    pub hash: ScriptHash,
    pub keys: Vec<Vec<u8>>,
    pub args: Vec<Vec<u8>>,
}

impl ScriptCall {
    pub fn run(&self, engine: &Engine) -> Result<ScriptValue, EngineError> {
        engine.eval_by_hash(&self.hash, &self.keys, &self.args)
    }
}

/// Outcome of decoding a limiter script reply.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptOutcome {
    Decided { decision: Decision, member: Option<Vec<u8>> },
    Duplicate,
}

pub fn decode_reply(value: &ScriptValue) -> Result<ScriptOutcome, LimitError> {
    let bad = || LimitError::BadReply(value.clone());
    let items = value.as_array().ok_or_else(bad)?;
    let [status, remaining, retry_after, member] = items else {
        return Err(bad());
    };
    let status = status.as_int().ok_or_else(bad)?;
    if status == STATUS_DUPLICATE {
        return Ok(ScriptOutcome::Duplicate);
    }
    let remaining = remaining.as_int().filter(|r| *r >= 0).ok_or_else(bad)? as u64;
    let member = member.as_bytes().map(<[u8]>::to_vec);
    let decision = match status {
        STATUS_ALLOWED => Decision::allow(remaining),
        STATUS_DENIED => Decision::deny(remaining, retry_after.as_float().ok_or_else(bad)?),
        _ => return Err(bad()),
    };
    Ok(ScriptOutcome::Decided { decision, member })
}

#[derive(Debug, Clone)]
struct Hashes {
    rolling: ScriptHash,
    concurrent: ScriptHash,
    token_bucket: ScriptHash,
    fixed_window: ScriptHash,
}

/// Store-backed limiters. Cheap to share; all state lives in the engine.
pub struct AtomicLimiter {
    engine: Arc<Engine>,
    hashes: Hashes,
    rng: Mutex<StdRng>,
}

const MAX_ID_ATTEMPTS: usize = 8;

impl AtomicLimiter {
    pub fn new(engine: Arc<Engine>) -> Result<Self, EngineError> {
        Self::with_rng(engine, StdRng::from_os_rng())
    }

    /// A limiter whose generated ids and suffixes are reproducible.
    pub fn with_seed(engine: Arc<Engine>, seed: u64) -> Result<Self, EngineError> {
        Self::with_rng(engine, StdRng::seed_from_u64(seed))
    }

    fn with_rng(engine: Arc<Engine>, rng: StdRng) -> Result<Self, EngineError> {
        let hashes = Hashes {
            rolling: engine.load_script(ROLLING_WINDOW_SCRIPT)?,
            concurrent: engine.load_script(CONCURRENT_SCRIPT)?,
            token_bucket: engine.load_script(TOKEN_BUCKET_SCRIPT)?,
            fixed_window: engine.load_script(FIXED_WINDOW_SCRIPT)?,
        };
        Ok(Self {
            engine,
            hashes,
            rng: Mutex::new(rng),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn expect(params: &RuleParams, expected: Algorithm) -> Result<(), LimitError> {
        if params.algorithm != expected {
            return Err(LimitError::AlgorithmMismatch {
                expected,
                actual: params.algorithm,
            });
        }
        params.validate()?;
        Ok(())
    }

    fn suffix(&self) -> String {
        format!("{:04x}", self.rng.lock().random::<u16>())
    }

    /// Builds the rolling window invocation for `key` at `now`.
    pub fn rolling_window_call(&self, key: &LimitKey, params: &RuleParams, now: f64) -> ScriptCall {
        ScriptCall {
            hash: self.hashes.rolling.clone(),
            keys: vec![key.render().into_bytes()],
            args: vec![
                render_score(params.window_size).into_bytes(),
                params.max_requests.to_string().into_bytes(),
                render_score(params.min_interval).into_bytes(),
                render_score(params.ttl).into_bytes(),
                render_score(now).into_bytes(),
                self.suffix().into_bytes(),
                if params.count_rejected { b"1".to_vec() } else { b"0".to_vec() },
            ],
        }
    }

    pub fn concurrent_call(&self, key: &LimitKey, params: &RuleParams, now: f64, id: &RequestId) -> ScriptCall {
        ScriptCall {
            hash: self.hashes.concurrent.clone(),
            keys: vec![key.render().into_bytes()],
            args: vec![
                render_score(params.window_size).into_bytes(),
                params.max_concurrent.to_string().into_bytes(),
                render_score(params.ttl).into_bytes(),
                render_score(now).into_bytes(),
                id.as_bytes().to_vec(),
            ],
        }
    }

    /// Rolling window check as one atomic script: drop entries at or before
    /// `now - window_size`, deny at `max_requests`, deny when the newest entry
    /// is closer than `min_interval`, else record `now` and refresh the TTL.
    pub fn rolling_window_check(&self, key: &LimitKey, params: &RuleParams, now: f64) -> Result<Decision, LimitError> {
        Self::expect(params, Algorithm::RollingWindow)?;
        for _ in 0..MAX_ID_ATTEMPTS {
            let call = self.rolling_window_call(key, params, now);
            match decode_reply(&call.run(&self.engine)?)? {
                ScriptOutcome::Decided { decision, .. } => return Ok(decision),
                ScriptOutcome::Duplicate => continue,
            }
        }
        Err(LimitError::Collision(MAX_ID_ATTEMPTS))
    }

    /// Concurrency check: on success the returned decision carries the id
    /// that must later be passed to [`Self::complete_request`].
    pub fn check_concurrent_request(&self, key: &LimitKey, params: &RuleParams, now: f64) -> Result<Decision, LimitError> {
        Self::expect(params, Algorithm::Concurrent)?;
        for _ in 0..MAX_ID_ATTEMPTS {
            let id = RequestId::generate(&mut *self.rng.lock());
            let call = self.concurrent_call(key, params, now, &id);
            match decode_reply(&call.run(&self.engine)?)? {
                ScriptOutcome::Decided { decision, .. } if decision.allowed => return Ok(decision.with_request_id(id)),
                ScriptOutcome::Decided { decision, .. } => return Ok(decision),
                ScriptOutcome::Duplicate => continue,
            }
        }
        Err(LimitError::Collision(MAX_ID_ATTEMPTS))
    }

    /// Releases an in-flight slot. False if the id was not in flight.
    pub fn complete_request(&self, key: &LimitKey, request_id: &RequestId) -> Result<bool, EngineError> {
        Ok(self.engine.z_rem(key.render().as_bytes(), request_id.as_bytes())? == 1)
    }

    /// Runs `action` inside a concurrency slot. The slot is released however
    /// the action ends, including by panic.
    pub fn do_request<T, E>(
        &self,
        key: &LimitKey,
        params: &RuleParams,
        now: f64,
        action: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, DoRequestError<E>> {
        let decision = self
            .check_concurrent_request(key, params, now)
            .map_err(DoRequestError::Limiter)?;
        let Some(id) = decision.request_id else {
            return Err(DoRequestError::RateLimited {
                retry_after: decision.retry_after,
            });
        };

        struct Release<'a> {
            limiter: &'a AtomicLimiter,
            key: &'a LimitKey,
            id: RequestId,
        }
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                // Best effort: an unreachable store leaves the entry to expire.
                let _ = self.limiter.complete_request(self.key, &self.id);
            }
        }
        let _release = Release { limiter: self, key, id };
        action().map_err(DoRequestError::Action)
    }

    pub fn token_bucket_check(&self, key: &LimitKey, params: &RuleParams, now: f64, cost: f64) -> Result<Decision, LimitError> {
        Self::expect(params, Algorithm::TokenBucket)?;
        if cost > params.capacity {
            return Err(ParamsError::CostExceedsCapacity {
                cost,
                capacity: params.capacity,
            }
            .into());
        }
        let call = ScriptCall {
            hash: self.hashes.token_bucket.clone(),
            keys: vec![key.render().into_bytes()],
            args: vec![
                render_score(params.capacity).into_bytes(),
                render_score(params.refill_rate).into_bytes(),
                render_score(params.ttl).into_bytes(),
                render_score(now).into_bytes(),
                render_score(cost).into_bytes(),
            ],
        };
        self.run_simple(&call)
    }

    pub fn fixed_window_check(&self, key: &LimitKey, params: &RuleParams, now: f64) -> Result<Decision, LimitError> {
        Self::expect(params, Algorithm::FixedWindow)?;
        let call = ScriptCall {
            hash: self.hashes.fixed_window.clone(),
            keys: vec![key.render().into_bytes()],
            args: vec![
                render_score(params.window_size).into_bytes(),
                params.max_requests.to_string().into_bytes(),
                render_score(params.ttl).into_bytes(),
                render_score(now).into_bytes(),
            ],
        };
        self.run_simple(&call)
    }

    fn run_simple(&self, call: &ScriptCall) -> Result<Decision, LimitError> {
        let value = call.run(&self.engine)?;
        match decode_reply(&value)? {
            ScriptOutcome::Decided { decision, .. } => Ok(decision),
            ScriptOutcome::Duplicate => Err(LimitError::BadReply(value)),
        }
    }

    /// Dispatches on `params.algorithm`. `cost` only matters to the token bucket.
    pub fn check(&self, key: &LimitKey, params: &RuleParams, now: f64, cost: f64) -> Result<Decision, LimitError> {
        match params.algorithm {
            Algorithm::RollingWindow => self.rolling_window_check(key, params, now),
            Algorithm::Concurrent => self.check_concurrent_request(key, params, now),
            Algorithm::TokenBucket => self.token_bucket_check(key, params, now, cost),
            Algorithm::FixedWindow => self.fixed_window_check(key, params, now),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn setup() -> (Arc<ManualClock>, AtomicLimiter) {
        let clock = Arc::new(ManualClock::new(0.0));
        let engine = Arc::new(Engine::new(clock.clone()));
        (clock, AtomicLimiter::with_seed(engine, 7).unwrap())
    }

    fn user(id: &str) -> LimitKey {
        LimitKey::rate_limiter(id).unwrap()
    }

    #[test]
    fn rolling_window_fresh_key_allows() {
        let (_, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 100);
        let d = limiter.rolling_window_check(&user("u1"), &params, 0.0).unwrap();
        assert_eq!(d, Decision::allow(99));
    }

    #[test]
    fn rolling_window_retry_after_counts_to_oldest_exit() {
        let (clock, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 100).with_ttl(120.0);
        clock.set(59.9);
        for _ in 0..100 {
            assert!(limiter.rolling_window_check(&user("u"), &params, 59.9).unwrap().allowed);
        }
        clock.set(60.1);
        let d = limiter.rolling_window_check(&user("u"), &params, 60.1).unwrap();
        assert!(!d.allowed);
        // Oldest entry 59.9 leaves the window at 119.9.
        assert!((d.retry_after.unwrap() - 59.8).abs() < 1e-9);
    }

    #[test]
    fn rolling_window_min_interval() {
        let (_, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 100).with_min_interval(1.0);
        assert!(limiter.rolling_window_check(&user("u"), &params, 10.0).unwrap().allowed);
        let d = limiter.rolling_window_check(&user("u"), &params, 10.4).unwrap();
        assert!(!d.allowed);
        assert!((d.retry_after.unwrap() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn rolling_window_same_tick_members_are_distinct() {
        let (_, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 3);
        for _ in 0..3 {
            assert!(limiter.rolling_window_check(&user("u"), &params, 5.0).unwrap().allowed);
        }
        assert!(!limiter.rolling_window_check(&user("u"), &params, 5.0).unwrap().allowed);
        assert_eq!(limiter.engine().z_card(b"rate_limiter:u").unwrap(), 3);
    }

    #[test]
    fn rolling_window_denial_does_not_write() {
        let (_, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 1).with_ttl(60.0);
        limiter.rolling_window_check(&user("u"), &params, 0.0).unwrap();
        let before = limiter.engine().snapshot();
        assert!(!limiter.rolling_window_check(&user("u"), &params, 1.0).unwrap().allowed);
        assert_eq!(limiter.engine().snapshot(), before);
    }

    #[test]
    fn rolling_window_sets_ttl_on_allow() {
        let (clock, limiter) = setup();
        let params = RuleParams::rolling_window(60.0, 5).with_ttl(90.0);
        clock.set(10.0);
        limiter.rolling_window_check(&user("u"), &params, 10.0).unwrap();
        assert_eq!(limiter.engine().ttl(b"rate_limiter:u").unwrap(), Some(90.0));
    }

    #[test]
    fn wrong_algorithm_is_rejected() {
        let (_, limiter) = setup();
        let params = RuleParams::fixed_window(60.0, 5);
        assert!(matches!(
            limiter.rolling_window_check(&user("u"), &params, 0.0),
            Err(LimitError::AlgorithmMismatch { .. })
        ));
        assert_eq!(LimitKey::rate_limiter(""), Err(LimitError::EmptyDiscriminator));
    }

    #[test]
    fn concurrent_limit_and_release() {
        let (_, limiter) = setup();
        let key = LimitKey::concurrent_limiter("u").unwrap();
        let params = RuleParams::concurrent(50, 60.0);
        let ids: Vec<RequestId> = (0..50)
            .map(|_| {
                let d = limiter.check_concurrent_request(&key, &params, 1.0).unwrap();
                assert!(d.allowed);
                d.request_id.unwrap()
            })
            .collect();
        let denied = limiter.check_concurrent_request(&key, &params, 1.0).unwrap();
        assert!(!denied.allowed);
        assert!(denied.request_id.is_none());
        assert!(denied.retry_after.is_some());

        // Same timestamp for all 50: members are the distinct ids.
        assert_eq!(limiter.engine().z_card(key.render().as_bytes()).unwrap(), 50);

        assert!(limiter.complete_request(&key, &ids[0]).unwrap());
        assert!(!limiter.complete_request(&key, &ids[0]).unwrap());
        let again = limiter.check_concurrent_request(&key, &params, 1.0).unwrap();
        assert!(again.allowed);
        let unknown = RequestId::parse("deadbeef").unwrap();
        assert!(!limiter.complete_request(&key, &unknown).unwrap());
    }

    #[test]
    fn do_request_releases_slot_on_every_path() {
        let (_, limiter) = setup();
        let key = LimitKey::concurrent_limiter("u").unwrap();
        let params = RuleParams::concurrent(1, 60.0);
        let in_flight = || limiter.engine().z_card(key.render().as_bytes()).unwrap();

        let ok: Result<u32, DoRequestError<&str>> = limiter.do_request(&key, &params, 0.0, || Ok(7));
        assert_eq!(ok.unwrap(), 7);
        assert_eq!(in_flight(), 0);

        let failed: Result<u32, _> = limiter.do_request(&key, &params, 0.0, || Err("boom"));
        assert!(matches!(failed, Err(DoRequestError::Action("boom"))));
        assert_eq!(in_flight(), 0);

        let held = limiter.check_concurrent_request(&key, &params, 0.0).unwrap();
        assert!(held.allowed);
        let denied: Result<u32, DoRequestError<&str>> = limiter.do_request(&key, &params, 0.0, || Ok(1));
        assert!(matches!(denied, Err(DoRequestError::RateLimited { .. })));
        assert_eq!(in_flight(), 1);
        limiter.complete_request(&key, &held.request_id.unwrap()).unwrap();

        let panicked = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _: Result<(), DoRequestError<()>> = limiter.do_request(&key, &params, 0.0, || panic!("inside action"));
        }));
        assert!(panicked.is_err());
        assert_eq!(in_flight(), 0);
    }

    #[test]
    fn duplicate_request_id_is_refused_without_rescoring() {
        let (_, limiter) = setup();
        let key = LimitKey::concurrent_limiter("u").unwrap();
        let params = RuleParams::concurrent(5, 60.0);
        let id = RequestId::parse("0badf00d").unwrap();
        let first = limiter.concurrent_call(&key, &params, 1.0, &id).run(limiter.engine()).unwrap();
        assert!(matches!(decode_reply(&first).unwrap(), ScriptOutcome::Decided { .. }));
        let second = limiter.concurrent_call(&key, &params, 2.0, &id).run(limiter.engine()).unwrap();
        assert_eq!(decode_reply(&second).unwrap(), ScriptOutcome::Duplicate);
        assert_eq!(limiter.engine().z_score(key.render().as_bytes(), id.as_bytes()).unwrap(), Some(1.0));
    }

    #[test]
    fn token_bucket_and_fixed_window_scripts_match_reference() {
        let (clock, limiter) = setup();
        let tb = RuleParams::token_bucket(10.0, 1.0);
        let key = LimitKey::new("token_bucket", "u").unwrap();
        let mut state = TokenBucketState::full(&tb, 0.0);
        let fw = RuleParams::fixed_window(10.0, 3);
        let fkey = LimitKey::new("fixed_window", "u").unwrap();
        let mut fstate = FixedWindowState::default();
        for i in 0..60 {
            let now = i as f64 * 0.7;
            clock.set(now);
            let (expected, next) = limiter::token_bucket_allow(state, &tb, now, 2.0).unwrap();
            state = next;
            assert_eq!(limiter.token_bucket_check(&key, &tb, now, 2.0).unwrap(), expected);
            let (expected, next) = limiter::fixed_window_allow(fstate, &fw, now).unwrap();
            fstate = next;
            assert_eq!(limiter.fixed_window_check(&fkey, &fw, now).unwrap(), expected);
        }
        assert!(limiter.token_bucket_check(&key, &tb, 50.0, 11.0).is_err());
    }

    #[test]
    fn counter_script_increments_atomically() {
        let clock = Arc::new(ManualClock::new(0.0));
        let engine = Arc::new(Engine::new(clock));
        let hash = engine.load_script(COUNTER_INCR_SCRIPT).unwrap();
        let threads: Vec<_> = (0..2)
            .map(|_| {
                let engine = engine.clone();
                let hash = hash.clone();
                std::thread::spawn(move || {
                    for _ in 0..500 {
                        engine.eval_by_hash(&hash, &[b"c".to_vec()], &[b"1".to_vec()]).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(engine.get_number(b"c").unwrap(), Some(1000.0));
    }

    #[test]
    fn script_loading_is_idempotent_and_distinct() {
        let (_, limiter) = setup();
        let e = limiter.engine();
        assert_eq!(e.load_script(ROLLING_WINDOW_SCRIPT).unwrap(), e.load_script(ROLLING_WINDOW_SCRIPT).unwrap());
        assert_ne!(e.load_script(ROLLING_WINDOW_SCRIPT).unwrap(), e.load_script(CONCURRENT_SCRIPT).unwrap());
    }
}

//! Single-process limiters.
//!
//! Each limiter is a pure transition `(state, params, now) -> (decision, state)`.
//! Callers own the state and its synchronization. [`InMemoryLimiter`] wraps
//! the transitions in a keyed, mutex-guarded map for simple deployments.

use std::collections::{HashMap, VecDeque};

use parking_lot::Mutex;

use crate::params::{Algorithm, Decision, ParamsError, RuleParams};

/// Token bucket state: a reservoir of `tokens` last refilled at `last_refill`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucketState {
    pub tokens: f64,
    pub last_refill: f64,
}

impl TokenBucketState {
    /// A full bucket created at `now`.
    pub fn full(params: &RuleParams, now: f64) -> Self {
        Self {
            tokens: params.capacity,
            last_refill: now,
        }
    }
}

/// Fixed window state: requests counted in the window starting at `window_start`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FixedWindowState {
    pub count: u64,
    pub window_start: f64,
}

/// Rolling window state: ascending timestamps of recorded requests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RollingWindowState {
    pub timestamps: VecDeque<f64>,
}

pub fn token_bucket_allow(
    state: TokenBucketState,
    params: &RuleParams,
    now: f64,
    tokens_required: f64,
) -> Result<(Decision, TokenBucketState), ParamsError> {
    params.validate()?;
    if !(tokens_required > 0.0) {
        return Err(ParamsError::Cost(tokens_required));
    }
    if tokens_required > params.capacity {
        return Err(ParamsError::CostExceedsCapacity {
            cost: tokens_required,
            capacity: params.capacity,
        });
    }

    let elapsed = (now - state.last_refill).max(0.0);
    let mut tokens = params.capacity.min(state.tokens + elapsed * params.refill_rate);
    let decision = if tokens >= tokens_required {
        tokens -= tokens_required;
        Decision::allow(tokens.floor() as u64)
    } else {
        Decision::deny(tokens.floor() as u64, (tokens_required - tokens) / params.refill_rate)
    };
    Ok((
        decision,
        TokenBucketState {
            tokens,
            last_refill: now.max(state.last_refill),
        },
    ))
}

/// Start of the aligned window containing `now`.
pub fn window_start(now: f64, window_size: f64) -> f64 {
    (now / window_size).floor() * window_size
}

pub fn fixed_window_allow(
    state: FixedWindowState,
    params: &RuleParams,
    now: f64,
) -> Result<(Decision, FixedWindowState), ParamsError> {
    params.validate()?;
    let current = window_start(now, params.window_size);
    let mut next = state;
    if next.window_start < current {
        next = FixedWindowState {
            count: 0,
            window_start: current,
        };
    }

    let decision = if next.count < params.max_requests {
        next.count += 1;
        Decision::allow(params.max_requests - next.count)
    } else {
        Decision::deny(0, next.window_start + params.window_size - now)
    };
    Ok((decision, next))
}

pub fn rolling_window_allow(
    state: RollingWindowState,
    params: &RuleParams,
    now: f64,
) -> Result<(Decision, RollingWindowState), ParamsError> {
    params.validate()?;
    let mut next = state;
    let cutoff = now - params.window_size;
    // An entry sitting exactly on the cutoff is already outside the window.
    while next.timestamps.front().is_some_and(|&t| t <= cutoff) {
        next.timestamps.pop_front();
    }

    let count = next.timestamps.len() as u64;
    let decision = if count >= params.max_requests {
        let oldest = next.timestamps.front().copied().unwrap_or(now);
        Some(Decision::deny(0, oldest + params.window_size - now))
    } else {
        match next.timestamps.back() {
            Some(&last) if params.min_interval > 0.0 && now - last < params.min_interval => Some(Decision::deny(
                params.max_requests - count,
                last + params.min_interval - now,
            )),
            _ => None,
        }
    };

    match decision {
        Some(denied) => {
            if params.count_rejected {
                next.timestamps.push_back(now);
            }
            Ok((denied, next))
        }
        None => {
            next.timestamps.push_back(now);
            Ok((Decision::allow(params.max_requests - count - 1), next))
        }
    }
}

#[derive(Debug, Clone)]
enum LimiterState {
    TokenBucket(TokenBucketState),
    FixedWindow(FixedWindowState),
    RollingWindow(RollingWindowState),
}

/// Keyed single-process limiter.
///
/// Concurrency limiting needs request completion tracking and is only offered
/// by the store-backed limiter in [`crate::atomic`].
#[derive(Debug)]
pub struct InMemoryLimiter {
    params: RuleParams,
    states: Mutex<HashMap<String, LimiterState>>,
}

impl InMemoryLimiter {
    pub fn new(params: RuleParams) -> Result<Self, ParamsError> {
        params.validate()?;
        if params.algorithm == Algorithm::Concurrent {
            return Err(ParamsError::UnknownAlgorithm(params.algorithm.to_string()));
        }
        Ok(Self {
            params,
            states: Mutex::new(HashMap::new()),
        })
    }

    pub fn check(&self, key: &str, now: f64, cost: f64) -> Result<Decision, ParamsError> {
        let mut states = self.states.lock();
        let params = &self.params;
        let state = states.entry(key.to_string()).or_insert_with(|| match params.algorithm {
            Algorithm::TokenBucket => LimiterState::TokenBucket(TokenBucketState::full(params, now)),
            Algorithm::FixedWindow => LimiterState::FixedWindow(FixedWindowState {
                count: 0,
                window_start: window_start(now, params.window_size),
            }),
            _ => LimiterState::RollingWindow(RollingWindowState::default()),
        });
        let decision = match state {
            LimiterState::TokenBucket(s) => {
                let (d, n) = token_bucket_allow(*s, params, now, cost)?;
                *s = n;
                d
            }
            LimiterState::FixedWindow(s) => {
                let (d, n) = fixed_window_allow(*s, params, now)?;
                *s = n;
                d
            }
            LimiterState::RollingWindow(s) => {
                let (d, n) = rolling_window_allow(std::mem::take(s), params, now)?;
                *s = n;
                d
            }
        };
        Ok(decision)
    }
}

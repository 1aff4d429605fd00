use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which limiting algorithm a rule is enforced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    TokenBucket,
    FixedWindow,
    RollingWindow,
    Concurrent,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::TokenBucket,
        Algorithm::FixedWindow,
        Algorithm::RollingWindow,
        Algorithm::Concurrent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::TokenBucket => "token_bucket",
            Algorithm::FixedWindow => "fixed_window",
            Algorithm::RollingWindow => "rolling_window",
            Algorithm::Concurrent => "concurrent",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = ParamsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ParamsError::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("window_size must be positive and finite, got {0}")]
    WindowSize(f64),
    #[error("max_requests must be at least 1")]
    MaxRequests,
    #[error("max_concurrent must be at least 1")]
    MaxConcurrent,
    #[error("min_interval must be non-negative and below window_size ({window_size}), got {min_interval}")]
    MinInterval { min_interval: f64, window_size: f64 },
    #[error("ttl ({ttl}) must be at least window_size ({window_size})")]
    Ttl { ttl: f64, window_size: f64 },
    #[error("token bucket capacity must be at least 1, got {0}")]
    Capacity(f64),
    #[error("token bucket refill_rate must be positive, got {0}")]
    RefillRate(f64),
    #[error("request cost {cost} exceeds bucket capacity {capacity}")]
    CostExceedsCapacity { cost: f64, capacity: f64 },
    #[error("request cost must be positive, got {0}")]
    Cost(f64),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
}

/// Tunables of one limit.
///
/// Not every field is used by every algorithm: the window based limiters read
/// `window_size`, `max_requests`, `min_interval` and `ttl`; the token bucket
/// reads `capacity` and `refill_rate`; the concurrent limiter reads
/// `max_concurrent`, `window_size` (stale entry cleanup) and `ttl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    pub algorithm: Algorithm,
    pub window_size: f64,
    pub max_requests: u64,
    pub min_interval: f64,
    pub ttl: f64,
    pub capacity: f64,
    pub refill_rate: f64,
    pub max_concurrent: u64,
    /// Record denied requests in rolling window state as well. Off by default.
    #[serde(default)]
    pub count_rejected: bool,
}

impl RuleParams {
    /// Parameters for `algorithm` admitting `limit` requests per `window_size`
    /// seconds. Derived fields get the obvious values: ttl equals the window,
    /// the bucket holds `limit` tokens refilled over one window, and the
    /// concurrency bound is `limit`.
    pub fn new(algorithm: Algorithm, window_size: f64, limit: u64) -> Self {
        Self {
            algorithm,
            window_size,
            max_requests: limit,
            min_interval: 0.0,
            ttl: window_size,
            capacity: limit as f64,
            refill_rate: limit as f64 / window_size,
            max_concurrent: limit,
            count_rejected: false,
        }
    }

    pub fn rolling_window(window_size: f64, max_requests: u64) -> Self {
        Self::new(Algorithm::RollingWindow, window_size, max_requests)
    }

    pub fn fixed_window(window_size: f64, max_requests: u64) -> Self {
        Self::new(Algorithm::FixedWindow, window_size, max_requests)
    }

    pub fn token_bucket(capacity: f64, refill_rate: f64) -> Self {
        let window_size = (capacity / refill_rate).max(f64::MIN_POSITIVE);
        Self {
            capacity,
            refill_rate,
            ..Self::new(Algorithm::TokenBucket, window_size, capacity.max(1.0) as u64)
        }
    }

    pub fn concurrent(max_concurrent: u64, window_size: f64) -> Self {
        Self::new(Algorithm::Concurrent, window_size, max_concurrent)
    }

    pub fn with_min_interval(mut self, min_interval: f64) -> Self {
        self.min_interval = min_interval;
        self
    }

    pub fn with_ttl(mut self, ttl: f64) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn with_count_rejected(mut self, on: bool) -> Self {
        self.count_rejected = on;
        self
    }

    /// The configured limit as clients see it.
    pub fn limit(&self) -> u64 {
        match self.algorithm {
            Algorithm::TokenBucket => self.capacity.floor() as u64,
            Algorithm::Concurrent => self.max_concurrent,
            Algorithm::FixedWindow | Algorithm::RollingWindow => self.max_requests,
        }
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(self.window_size.is_finite() && self.window_size > 0.0) {
            return Err(ParamsError::WindowSize(self.window_size));
        }
        if self.max_requests < 1 {
            return Err(ParamsError::MaxRequests);
        }
        if !(self.min_interval >= 0.0 && self.min_interval < self.window_size) {
            return Err(ParamsError::MinInterval {
                min_interval: self.min_interval,
                window_size: self.window_size,
            });
        }
        if !(self.ttl.is_finite() && self.ttl >= self.window_size) {
            return Err(ParamsError::Ttl {
                ttl: self.ttl,
                window_size: self.window_size,
            });
        }
        match self.algorithm {
            Algorithm::TokenBucket => {
                if !(self.capacity.is_finite() && self.capacity >= 1.0) {
                    return Err(ParamsError::Capacity(self.capacity));
                }
                if !(self.refill_rate.is_finite() && self.refill_rate > 0.0) {
                    return Err(ParamsError::RefillRate(self.refill_rate));
                }
            }
            Algorithm::Concurrent => {
                if self.max_concurrent < 1 {
                    return Err(ParamsError::MaxConcurrent);
                }
            }
            Algorithm::FixedWindow | Algorithm::RollingWindow => {}
        }
        Ok(())
    }
}

/// Identifier of one in-flight request, rendered as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(String);

impl RequestId {
    /// Random bytes per id. Eight bytes gives 2^64 possible ids.
    pub const BYTES: usize = 8;

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; Self::BYTES];
        rng.fill(&mut bytes[..]);
        Self(hex::encode(bytes))
    }

    /// Accepts any hex string of at least four bytes.
    pub fn parse(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        (bytes.len() >= 4).then(|| Self(s.to_ascii_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Outcome of one limit check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub allowed: bool,
    pub remaining: u64,
    /// Seconds until the check could succeed. Only set on denial.
    pub retry_after: Option<f64>,
    /// Only set when a concurrent-limiter check is allowed.
    pub request_id: Option<RequestId>,
}

impl Decision {
    pub fn allow(remaining: u64) -> Self {
        Self {
            allowed: true,
            remaining,
            retry_after: None,
            request_id: None,
        }
    }

    pub fn deny(remaining: u64, retry_after: f64) -> Self {
        Self {
            allowed: false,
            remaining,
            retry_after: Some(retry_after),
            request_id: None,
        }
    }

    pub fn with_request_id(mut self, id: RequestId) -> Self {
        debug_assert!(self.allowed);
        self.request_id = Some(id);
        self
    }
}

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use limitd_core::atomic::{AtomicLimiter, LimitError, LimitKey};
use limitd_core::engine::{Engine, EngineError};
use limitd_core::rules::{RateLimitRule, RuleError, RuleManager};
use limitd_core::{Algorithm, Clock, RequestId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::GatewayMetrics;

/// What to answer when the store cannot be reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailPolicy {
    /// Admit the request unchecked and flag the response as degraded.
    #[default]
    FailOpen,
    /// Deny the request.
    FailClosed,
}

impl FromStr for FailPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "fail_open" => Ok(FailPolicy::FailOpen),
            "fail_closed" => Ok(FailPolicy::FailClosed),
            other => Err(format!("unknown fail policy {other:?}, expected fail_open or fail_closed")),
        }
    }
}

/// Retry hint given when failing closed.
pub const FAIL_CLOSED_RETRY_AFTER: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRequest {
    pub domain: String,
    pub descriptors: BTreeMap<String, String>,
    #[serde(default = "default_cost")]
    pub cost: u64,
}

fn default_cost() -> u64 {
    1
}

impl CheckRequest {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            descriptors: BTreeMap::new(),
            cost: 1,
        }
    }

    pub fn descriptor(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.descriptors.insert(key.into(), value.into());
        self
    }

    pub fn with_cost(mut self, cost: u64) -> Self {
        self.cost = cost;
        self
    }
}

/// A concurrency slot held by an admitted request; release it through
/// [`Gateway::complete`] when the request finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlight {
    pub rule_id: String,
    pub value: String,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResponse {
    pub allowed: bool,
    pub limit: u64,
    pub remaining: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_rule: Option<String>,
    /// The decision was made without the store, under the fail policy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub in_flight: Vec<InFlight>,
}

impl CheckResponse {
    fn pass_through() -> Self {
        Self {
            allowed: true,
            limit: 0,
            remaining: 0,
            retry_after: None,
            matched_rule: None,
            degraded: false,
            in_flight: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckError {
    #[error("request needs at least one descriptor")]
    NoDescriptors,
    #[error("cost must be at least 1")]
    ZeroCost,
    #[error("rule {rule_id:?} cannot serve this request: {source}")]
    Rule { rule_id: String, source: LimitError },
    #[error(transparent)]
    Rules(#[from] RuleError),
}

impl CheckError {
    /// Caused by the request itself rather than the service.
    pub fn is_client_error(&self) -> bool {
        match self {
            CheckError::NoDescriptors | CheckError::ZeroCost => true,
            CheckError::Rule { source, .. } => matches!(source, LimitError::Params(_)),
            CheckError::Rules(_) => false,
        }
    }
}

/// Store key namespace of a rule's state.
pub fn namespace(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::Concurrent => LimitKey::CONCURRENT_LIMITER,
        _ => LimitKey::RATE_LIMITER,
    }
}

/// State key of `rule` for one descriptor value.
pub fn limit_key(rule: &RateLimitRule, value: &str) -> Result<LimitKey, LimitError> {
    if value.is_empty() {
        return Err(LimitError::EmptyDiscriminator);
    }
    LimitKey::new(namespace(rule.algorithm), format!("{}:{value}", rule.rule_id))
}

/// The request-answering core, independent of any transport.
///
/// Every descriptor of a request that names a configured rule is checked, in
/// ascending `rule_id` order. The first denial ends evaluation: rules after
/// it are not charged, rules before it keep their charge. Concurrency slots
/// taken before a denial are released, since the request will not run.
pub struct Gateway {
    rules: RuleManager,
    limiter: AtomicLimiter,
    metrics: GatewayMetrics,
    fail_policy: FailPolicy,
    clock: Arc<dyn Clock>,
}

impl Gateway {
    pub fn new(rules: RuleManager, fail_policy: FailPolicy) -> Result<Self, EngineError> {
        let engine = rules.engine().clone();
        let clock = engine.clock().clone();
        Ok(Self {
            limiter: AtomicLimiter::new(engine)?,
            rules,
            metrics: GatewayMetrics::default(),
            fail_policy,
            clock,
        })
    }

    pub fn rules(&self) -> &RuleManager {
        &self.rules
    }

    pub fn engine(&self) -> &Arc<Engine> {
        self.limiter.engine()
    }

    pub fn metrics(&self) -> &GatewayMetrics {
        &self.metrics
    }

    pub fn fail_policy(&self) -> FailPolicy {
        self.fail_policy
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    fn matching_rules(&self, request: &CheckRequest) -> Result<Vec<(RateLimitRule, String)>, CheckError> {
        let mut matched = Vec::new();
        for (key, value) in &request.descriptors {
            match self.rules.get_rule(&request.domain, key) {
                Ok(rule) => matched.push((rule, value.clone())),
                Err(RuleError::NotFound(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        matched.sort_by(|a, b| a.0.rule_id.cmp(&b.0.rule_id));
        Ok(matched)
    }

    pub fn handle_check(&self, request: &CheckRequest, now: f64) -> Result<CheckResponse, CheckError> {
        if request.descriptors.is_empty() {
            return Err(CheckError::NoDescriptors);
        }
        if request.cost == 0 {
            return Err(CheckError::ZeroCost);
        }
        let started = Instant::now();
        let matched = self.matching_rules(request)?;
        if matched.is_empty() {
            return Ok(CheckResponse::pass_through());
        }

        let mut response: Option<CheckResponse> = None;
        let mut in_flight = Vec::new();
        for (rule, value) in &matched {
            let params = rule.params();
            let key = limit_key(rule, value).map_err(|source| CheckError::Rule {
                rule_id: rule.rule_id.clone(),
                source,
            })?;
            let decision = match self.limiter.check(&key, &params, now, request.cost as f64) {
                Ok(decision) => decision,
                Err(LimitError::Engine(_)) => {
                    self.release(&in_flight);
                    return Ok(self.degraded(rule, &params));
                }
                Err(source) => {
                    self.release(&in_flight);
                    return Err(CheckError::Rule {
                        rule_id: rule.rule_id.clone(),
                        source,
                    });
                }
            };
            self.metrics
                .record_decision(&rule.domain, &rule.descriptor_key, decision.allowed);

            let limit = params.limit();
            let candidate = CheckResponse {
                allowed: decision.allowed,
                limit,
                remaining: decision.remaining.min(limit),
                retry_after: decision.retry_after,
                matched_rule: Some(rule.rule_id.clone()),
                degraded: false,
                in_flight: Vec::new(),
            };
            if !decision.allowed {
                self.release(&in_flight);
                response = Some(candidate);
                break;
            }
            if let Some(id) = decision.request_id {
                in_flight.push(InFlight {
                    rule_id: rule.rule_id.clone(),
                    value: value.clone(),
                    request_id: id.to_string(),
                });
            }
            // Report the rule closest to its limit.
            if response.as_ref().is_none_or(|r| candidate.remaining < r.remaining) {
                response = Some(candidate);
            }
        }

        let mut response = response.expect("at least one rule matched");
        if response.allowed {
            response.in_flight = in_flight;
        }
        self.metrics.record_latency(started.elapsed().as_micros() as u64);
        Ok(response)
    }

    fn degraded(&self, rule: &RateLimitRule, params: &limitd_core::RuleParams) -> CheckResponse {
        self.metrics.record_store_error();
        self.metrics.record_degraded();
        let limit = params.limit();
        let allowed = self.fail_policy == FailPolicy::FailOpen;
        CheckResponse {
            allowed,
            limit,
            remaining: if allowed { limit } else { 0 },
            retry_after: (!allowed).then_some(FAIL_CLOSED_RETRY_AFTER),
            matched_rule: Some(rule.rule_id.clone()),
            degraded: true,
            in_flight: Vec::new(),
        }
    }

    fn release(&self, in_flight: &[InFlight]) {
        for slot in in_flight {
            // Best effort: an unreleased slot expires with its window.
            let _ = self.complete(slot);
        }
    }

    /// Releases a concurrency slot. False if it was not held.
    pub fn complete(&self, slot: &InFlight) -> Result<bool, CheckError> {
        let rule = self.rules.get_rule_by_id(&slot.rule_id)?;
        let rule_error = |source| CheckError::Rule {
            rule_id: slot.rule_id.clone(),
            source,
        };
        let key = limit_key(&rule, &slot.value).map_err(rule_error)?;
        let Some(id) = RequestId::parse(&slot.request_id) else {
            return Ok(false);
        };
        self.limiter
            .complete_request(&key, &id)
            .map_err(|e| rule_error(LimitError::Engine(e)))
    }
}

use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

/// Upper bounds, in microseconds, of the check latency histogram buckets.
pub const LATENCY_BUCKETS_US: [u64; 9] = [25, 50, 100, 250, 500, 1_000, 2_500, 10_000, 100_000];

#[derive(Debug, Default)]
struct RuleCounters {
    allowed: AtomicU64,
    denied: AtomicU64,
}

/// Counters exposed on the metrics endpoint. Lock-free on the hot path once
/// a `(domain, descriptor_key)` pair has been seen.
#[derive(Debug, Default)]
pub struct GatewayMetrics {
    per_rule: RwLock<BTreeMap<(String, String), Arc<RuleCounters>>>,
    latency: [AtomicU64; LATENCY_BUCKETS_US.len() + 1],
    latency_sum_us: AtomicU64,
    store_errors: AtomicU64,
    degraded: AtomicU64,
}

impl GatewayMetrics {
    fn counters(&self, domain: &str, descriptor_key: &str) -> Arc<RuleCounters> {
        let key = (domain.to_string(), descriptor_key.to_string());
        if let Some(c) = self.per_rule.read().get(&key) {
            return c.clone();
        }
        self.per_rule.write().entry(key).or_default().clone()
    }

    pub fn record_decision(&self, domain: &str, descriptor_key: &str, allowed: bool) {
        let c = self.counters(domain, descriptor_key);
        if allowed {
            c.allowed.fetch_add(1, Ordering::Relaxed);
        } else {
            c.denied.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn record_latency(&self, micros: u64) {
        let bucket = LATENCY_BUCKETS_US
            .iter()
            .position(|&b| micros <= b)
            .unwrap_or(LATENCY_BUCKETS_US.len());
        self.latency[bucket].fetch_add(1, Ordering::Relaxed);
        self.latency_sum_us.fetch_add(micros, Ordering::Relaxed);
    }

    pub fn record_store_error(&self) {
        self.store_errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_degraded(&self) {
        self.degraded.fetch_add(1, Ordering::Relaxed);
    }

    pub fn allowed_total(&self, domain: &str, descriptor_key: &str) -> u64 {
        self.counters(domain, descriptor_key).allowed.load(Ordering::Relaxed)
    }

    pub fn denied_total(&self, domain: &str, descriptor_key: &str) -> u64 {
        self.counters(domain, descriptor_key).denied.load(Ordering::Relaxed)
    }

    pub fn store_errors(&self) -> u64 {
        self.store_errors.load(Ordering::Relaxed)
    }

    pub fn checks_timed(&self) -> u64 {
        self.latency.iter().map(|b| b.load(Ordering::Relaxed)).sum()
    }

    /// Plain-text exposition, one sample per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ((domain, key), c) in self.per_rule.read().iter() {
            let labels = format!("domain=\"{domain}\",descriptor=\"{key}\"");
            let _ = writeln!(out, "limitd_allowed_total{{{labels}}} {}", c.allowed.load(Ordering::Relaxed));
            let _ = writeln!(out, "limitd_denied_total{{{labels}}} {}", c.denied.load(Ordering::Relaxed));
        }
        let mut cumulative = 0;
        for (i, bucket) in self.latency.iter().enumerate() {
            cumulative += bucket.load(Ordering::Relaxed);
            let le = LATENCY_BUCKETS_US
                .get(i)
                .map_or_else(|| "+Inf".to_string(), |b| b.to_string());
            let _ = writeln!(out, "limitd_check_latency_us_bucket{{le=\"{le}\"}} {cumulative}");
        }
        let _ = writeln!(out, "limitd_check_latency_us_sum {}", self.latency_sum_us.load(Ordering::Relaxed));
        let _ = writeln!(out, "limitd_check_latency_us_count {cumulative}");
        let _ = writeln!(out, "limitd_store_errors_total {}", self.store_errors());
        let _ = writeln!(out, "limitd_degraded_total {}", self.degraded.load(Ordering::Relaxed));
        out
    }
}

//! Rule management in three layers: a persistent rule store, a TTL'd rule
//! cache in front of it, and script bindings that tie each rule to the
//! engine script enforcing its algorithm.
//!
//! Numeric limits are passed to scripts as arguments at call time, so
//! changing a limit never touches the loaded scripts; only an algorithm
//! change rebinds a rule to a different script.
//!
//! Rule documents are YAML:
//!
//! ```yaml
//! domain: api
//! descriptors:
//!   - key: user_id
//!     algorithm: rolling_window
//!     rate_limit:
//!       unit: minute
//!       requests_per_unit: 60
//!     min_interval_seconds: 0.5
//!     ttl_seconds: 120
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{argument_template, script_for};
use crate::clock::Clock;
use crate::engine::{Engine, EngineError, ScriptHash};
use crate::params::{Algorithm, ParamsError, RuleParams};

/// Default lifetime of a cached rule, in seconds.
pub const DEFAULT_CACHE_TTL: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Second,
    Minute,
    Hour,
}

impl Unit {
    pub fn seconds(self) -> f64 {
        match self {
            Unit::Second => 1.0,
            Unit::Minute => 60.0,
            Unit::Hour => 3600.0,
        }
    }
}

/// A persisted, addressable limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateLimitRule {
    pub rule_id: String,
    pub domain: String,
    pub descriptor_key: String,
    pub algorithm: Algorithm,
    pub unit: Unit,
    pub requests_per_unit: u64,
    #[serde(default)]
    pub min_interval: f64,
    pub ttl: f64,
    #[serde(default)]
    pub version: u64,
}

impl RateLimitRule {
    /// Identifier given to rules loaded from a document.
    pub fn default_id(domain: &str, descriptor_key: &str) -> String {
        format!("{domain}.{descriptor_key}")
    }

    pub fn params(&self) -> RuleParams {
        RuleParams::new(self.algorithm, self.unit.seconds(), self.requests_per_unit)
            .with_min_interval(self.min_interval)
            .with_ttl(self.ttl)
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        let invalid = |reason: String| RuleError::Validation {
            rule_id: self.rule_id.clone(),
            reason,
        };
        for (name, value) in [
            ("rule_id", &self.rule_id),
            ("domain", &self.domain),
            ("descriptor_key", &self.descriptor_key),
        ] {
            if value.is_empty() {
                return Err(invalid(format!("{name} must not be empty")));
            }
        }
        if self.requests_per_unit == 0 {
            return Err(invalid(ParamsError::MaxRequests.to_string()));
        }
        self.params().validate().map_err(|e| invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("rule document parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("rule {rule_id:?} is invalid: {reason}")]
    Validation { rule_id: String, reason: String },
    #[error("no rule for {0}")]
    NotFound(String),
    #[error("rule {rule_id:?} is at version {current}, update was based on {supplied}")]
    VersionConflict { rule_id: String, current: u64, supplied: u64 },
    #[error("rule store I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDocument {
    domain: String,
    #[serde(default)]
    descriptors: Vec<DescriptorEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorEntry {
    key: String,
    #[serde(default = "default_algorithm")]
    algorithm: Algorithm,
    rate_limit: RateLimitSpec,
    min_interval_seconds: Option<f64>,
    ttl_seconds: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateLimitSpec {
    unit: Unit,
    requests_per_unit: u64,
}

fn default_algorithm() -> Algorithm {
    Algorithm::RollingWindow
}

/// Parses and validates a rule document. Versions are left at 0.
pub fn parse_rule_document(source: &str) -> Result<Vec<RateLimitRule>, RuleError> {
    if source.trim().is_empty() {
        return Ok(Vec::new());
    }
    let doc: RuleDocument = serde_yaml::from_str(source).map_err(|e| RuleError::Parse {
        line: e.location().map(|l| l.line()),
        message: e.to_string(),
    })?;

    let mut seen = HashMap::new();
    let mut rules = Vec::with_capacity(doc.descriptors.len());
    for entry in doc.descriptors {
        let rule = RateLimitRule {
            rule_id: RateLimitRule::default_id(&doc.domain, &entry.key),
            domain: doc.domain.clone(),
            descriptor_key: entry.key,
            algorithm: entry.algorithm,
            unit: entry.rate_limit.unit,
            requests_per_unit: entry.rate_limit.requests_per_unit,
            min_interval: entry.min_interval_seconds.unwrap_or(0.0),
            ttl: entry.ttl_seconds.unwrap_or_else(|| entry.rate_limit.unit.seconds()),
            version: 0,
        };
        rule.validate()?;
        if seen.insert(rule.descriptor_key.clone(), ()).is_some() {
            return Err(RuleError::Validation {
                rule_id: rule.rule_id,
                reason: format!("descriptor key {:?} appears twice in domain {:?}", rule.descriptor_key, rule.domain),
            });
        }
        rules.push(rule);
    }
    Ok(rules)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreFile {
    rules: Vec<RateLimitRule>,
}

/// The persistent layer: every rule, keyed by id, optionally backed by a
/// YAML file that is atomically replaced on each write.
#[derive(Debug)]
pub struct RuleStore {
    path: Option<PathBuf>,
    rules: Mutex<BTreeMap<String, RateLimitRule>>,
    reads: AtomicU64,
}

impl RuleStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            rules: Mutex::new(BTreeMap::new()),
            reads: AtomicU64::new(0),
        }
    }

    /// Opens the store file at `path`, creating an empty store if absent.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RuleError> {
        let path = path.into();
        let rules = match fs::read_to_string(&path) {
            Ok(text) if text.trim().is_empty() => BTreeMap::new(),
            Ok(text) => {
                let file: StoreFile = serde_yaml::from_str(&text).map_err(|e| RuleError::Parse {
                    line: e.location().map(|l| l.line()),
                    message: e.to_string(),
                })?;
                file.rules.into_iter().map(|r| (r.rule_id.clone(), r)).collect()
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(RuleError::Io(e.to_string())),
        };
        Ok(Self {
            path: Some(path),
            rules: Mutex::new(rules),
            reads: AtomicU64::new(0),
        })
    }

    /// Number of lookups served by this layer.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn find(&self, domain: &str, descriptor_key: &str) -> Option<RateLimitRule> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.rules
            .lock()
            .values()
            .find(|r| r.domain == domain && r.descriptor_key == descriptor_key)
            .cloned()
    }

    fn get(&self, rule_id: &str) -> Option<RateLimitRule> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.rules.lock().get(rule_id).cloned()
    }

    fn all(&self) -> Vec<RateLimitRule> {
        self.rules.lock().values().cloned().collect()
    }

    fn persist(&self, rules: &BTreeMap<String, RateLimitRule>) -> Result<(), RuleError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let file = StoreFile {
            rules: rules.values().cloned().collect(),
        };
        let text = serde_yaml::to_string(&file).map_err(|e| RuleError::Io(e.to_string()))?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let io = |e: std::io::Error| RuleError::Io(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(text.as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Applies `change` to the rule map and persists the result. The map is
    /// left untouched if `change` or the write fails.
    fn transact<T>(
        &self,
        change: impl FnOnce(&mut BTreeMap<String, RateLimitRule>) -> Result<T, RuleError>,
    ) -> Result<T, RuleError> {
        let mut rules = self.rules.lock();
        let mut next = rules.clone();
        let out = change(&mut next)?;
        self.persist(&next)?;
        *rules = next;
        Ok(out)
    }
}

/// A rule held by the cache layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleCacheEntry {
    pub rule: RateLimitRule,
    pub cached_at: f64,
    pub cache_ttl: f64,
}

impl RuleCacheEntry {
    pub fn is_fresh(&self, now: f64) -> bool {
        now - self.cached_at < self.cache_ttl
    }
}

/// What a rule executes: the script hash and the argument order it expects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompiledRuleBinding {
    pub rule_id: String,
    pub algorithm: Algorithm,
    pub script_hash: ScriptHash,
    pub argument_template: Vec<String>,
}

/// Ties the three layers together.
pub struct RuleManager {
    store: RuleStore,
    cache: RwLock<HashMap<(String, String), RuleCacheEntry>>,
    bindings: RwLock<HashMap<String, CompiledRuleBinding>>,
    engine: Arc<Engine>,
    clock: Arc<dyn Clock>,
    cache_ttl: f64,
}

impl RuleManager {
    pub fn new(engine: Arc<Engine>, store: RuleStore, clock: Arc<dyn Clock>) -> Self {
        Self::with_cache_ttl(engine, store, clock, DEFAULT_CACHE_TTL)
    }

    pub fn with_cache_ttl(engine: Arc<Engine>, store: RuleStore, clock: Arc<dyn Clock>, cache_ttl: f64) -> Self {
        Self {
            store,
            cache: RwLock::new(HashMap::new()),
            bindings: RwLock::new(HashMap::new()),
            engine,
            clock,
            cache_ttl,
        }
    }

    pub fn store(&self) -> &RuleStore {
        &self.store
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn cache_ttl(&self) -> f64 {
        self.cache_ttl
    }

    /// Loads a rule document. The document replaces every stored rule of its
    /// domain; rules whose content is unchanged keep their version, others
    /// get the next version. Loaded rules are cached and bound to scripts.
    pub fn load_rules(&self, source: &str) -> Result<Vec<RateLimitRule>, RuleError> {
        let parsed = parse_rule_document(source)?;
        let Some(domain) = parsed.first().map(|r| r.domain.clone()) else {
            return Ok(Vec::new());
        };
        // Bind first so a rule is never visible without its script.
        for rule in &parsed {
            self.bind(rule)?;
        }

        let active = self.store.transact(|rules| {
            let previous: HashMap<String, RateLimitRule> = rules
                .iter()
                .filter(|(_, r)| r.domain == domain)
                .map(|(id, r)| (id.clone(), r.clone()))
                .collect();
            rules.retain(|_, r| r.domain != domain);
            let mut active = Vec::with_capacity(parsed.len());
            for mut rule in parsed {
                rule.version = match previous.get(&rule.rule_id) {
                    Some(old) if RateLimitRule { version: old.version, ..rule.clone() } == *old => old.version,
                    Some(old) => old.version + 1,
                    None => 1,
                };
                if let Some(clash) = rules.get(&rule.rule_id) {
                    return Err(RuleError::Validation {
                        rule_id: rule.rule_id.clone(),
                        reason: format!("rule id already used by domain {:?}", clash.domain),
                    });
                }
                rules.insert(rule.rule_id.clone(), rule.clone());
                active.push(rule);
            }
            Ok(active)
        })?;

        let now = self.clock.now();
        let mut cache = self.cache.write();
        cache.retain(|(d, _), _| *d != domain);
        for rule in &active {
            cache.insert(
                (rule.domain.clone(), rule.descriptor_key.clone()),
                RuleCacheEntry {
                    rule: rule.clone(),
                    cached_at: now,
                    cache_ttl: self.cache_ttl,
                },
            );
        }
        Ok(active)
    }

    /// Cache first; a miss or stale entry reads through to the store.
    pub fn get_rule(&self, domain: &str, descriptor_key: &str) -> Result<RateLimitRule, RuleError> {
        let now = self.clock.now();
        let cache_key = (domain.to_string(), descriptor_key.to_string());
        if let Some(entry) = self.cache.read().get(&cache_key) {
            if entry.is_fresh(now) {
                return Ok(entry.rule.clone());
            }
        }
        match self.store.find(domain, descriptor_key) {
            Some(rule) => {
                self.cache.write().insert(
                    cache_key,
                    RuleCacheEntry {
                        rule: rule.clone(),
                        cached_at: now,
                        cache_ttl: self.cache_ttl,
                    },
                );
                Ok(rule)
            }
            None => {
                self.cache.write().remove(&cache_key);
                Err(RuleError::NotFound(format!("{domain}/{descriptor_key}")))
            }
        }
    }

    pub fn get_rule_by_id(&self, rule_id: &str) -> Result<RateLimitRule, RuleError> {
        self.store
            .get(rule_id)
            .ok_or_else(|| RuleError::NotFound(rule_id.to_string()))
    }

    pub fn list_rules(&self) -> Vec<RateLimitRule> {
        self.store.all()
    }

    /// Persists `rule` as the next version of its `rule_id`.
    ///
    /// `rule.version` must be the version the caller read (0 to create a new
    /// rule). Existing limiter state is left alone.
    pub fn update_rule(&self, rule: RateLimitRule) -> Result<u64, RuleError> {
        rule.validate()?;
        let mut stored = rule.clone();
        let (old, version) = self.store.transact(|rules| {
            let current = rules.get(&rule.rule_id).cloned();
            let current_version = current.as_ref().map_or(0, |r| r.version);
            if rule.version != current_version {
                return Err(RuleError::VersionConflict {
                    rule_id: rule.rule_id.clone(),
                    current: current_version,
                    supplied: rule.version,
                });
            }
            if let Some(other) = rules
                .values()
                .find(|r| r.rule_id != rule.rule_id && r.domain == rule.domain && r.descriptor_key == rule.descriptor_key)
            {
                return Err(RuleError::Validation {
                    rule_id: rule.rule_id.clone(),
                    reason: format!("({}, {}) is already limited by {}", rule.domain, rule.descriptor_key, other.rule_id),
                });
            }
            stored.version = current_version + 1;
            rules.insert(stored.rule_id.clone(), stored.clone());
            Ok((current, stored.version))
        })?;

        {
            let mut cache = self.cache.write();
            cache.remove(&(stored.domain.clone(), stored.descriptor_key.clone()));
            if let Some(old) = &old {
                cache.remove(&(old.domain.clone(), old.descriptor_key.clone()));
            }
        }
        self.bind(&stored)?;
        Ok(version)
    }

    /// The script binding of `rule_id`.
    pub fn resolve_binding(&self, rule_id: &str) -> Result<CompiledRuleBinding, RuleError> {
        if let Some(binding) = self.bindings.read().get(rule_id) {
            return Ok(binding.clone());
        }
        let rule = self.get_rule_by_id(rule_id)?;
        self.bind(&rule)
    }

    /// Binds `rule` to its algorithm's script, reusing the binding when the
    /// algorithm is unchanged.
    fn bind(&self, rule: &RateLimitRule) -> Result<CompiledRuleBinding, RuleError> {
        if let Some(existing) = self.bindings.read().get(&rule.rule_id) {
            if existing.algorithm == rule.algorithm {
                return Ok(existing.clone());
            }
        }
        let binding = CompiledRuleBinding {
            rule_id: rule.rule_id.clone(),
            algorithm: rule.algorithm,
            script_hash: self.engine.load_script(script_for(rule.algorithm))?,
            argument_template: argument_template(rule.algorithm).iter().map(|s| s.to_string()).collect(),
        };
        self.bindings.write().insert(rule.rule_id.clone(), binding.clone());
        Ok(binding)
    }
}

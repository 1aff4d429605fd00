//! Embedded sorted-set store.
//!
//! One [`Engine`] executes every command and script on a single serialized
//! context: callers on any thread take turns, and a script runs start to
//! finish with no other command interleaved. Keys may carry an expiry
//! deadline; expired keys are dropped lazily on access and by
//! [`Engine::sweep_expired`].

mod script;
mod sorted_set;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;

pub use script::{arg_bytes, arg_f64, arg_u64, key_arg, Procedure, ScriptCatalog, ScriptHash, ScriptValue};
pub use sorted_set::{comparisons, SortedSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("no script loaded under hash {0}")]
    NoScript(ScriptHash),
    #[error("unknown procedure {0:?}")]
    UnknownProcedure(String),
    #[error("script error: {0}")]
    Script(String),
    #[error("key {0:?} holds a value of another type")]
    WrongType(String),
    #[error("score is not a number")]
    InvalidScore,
    #[error("store unavailable")]
    Unavailable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    SortedSet(SortedSet),
    /// Named doubles, e.g. a token bucket's `(tokens, last_refill)`.
    Hash(BTreeMap<Vec<u8>, f64>),
    Number(f64),
}

impl Value {
    /// Bytes under the logical cost model: 8 per stored double, 16 per
    /// `(timestamp, id)` sorted-set entry.
    pub fn logical_bytes(&self) -> u64 {
        match self {
            Value::SortedSet(set) => set.logical_bytes(),
            Value::Hash(fields) => 8 * fields.len() as u64,
            Value::Number(_) => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub value: Value,
    pub expire_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineStats {
    pub key_count: u64,
    pub logical_bytes: u64,
    pub command_count: u64,
}

/// Live records at one point in time, ordered by key.
pub type Snapshot = BTreeMap<Vec<u8>, Record>;

/// Renders a timestamp so that parsing it back yields the same double.
pub fn render_score(score: f64) -> String {
    format!("{score}")
}

fn key_name(key: &[u8]) -> String {
    String::from_utf8_lossy(key).into_owned()
}

/// The data a command or script operates on.
///
/// Obtained only through [`Engine`], which holds the execution lock for the
/// duration of a command or script. `now` is the engine clock reading taken
/// when the command started.
#[derive(Debug, Default)]
pub struct Keyspace {
    records: HashMap<Vec<u8>, Record>,
    now: f64,
}

impl Keyspace {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn is_live(record: &Record, now: f64) -> bool {
        record.expire_at.is_none_or(|at| at > now)
    }

    fn live(&mut self, key: &[u8]) -> Option<&mut Record> {
        let now = self.now;
        if self.records.get(key).is_some_and(|r| !Self::is_live(r, now)) {
            self.records.remove(key);
        }
        self.records.get_mut(key)
    }

    fn zset(&mut self, key: &[u8]) -> Result<Option<&mut SortedSet>, EngineError> {
        match self.live(key) {
            None => Ok(None),
            Some(Record {
                value: Value::SortedSet(set),
                ..
            }) => Ok(Some(set)),
            Some(_) => Err(EngineError::WrongType(key_name(key))),
        }
    }

    fn zset_or_insert(&mut self, key: &[u8]) -> Result<&mut SortedSet, EngineError> {
        if self.live(key).is_none() {
            self.records.insert(
                key.to_vec(),
                Record {
                    value: Value::SortedSet(SortedSet::default()),
                    expire_at: None,
                },
            );
        }
        Ok(self.zset(key)?.expect("record inserted above"))
    }

    fn drop_if_empty(&mut self, key: &[u8]) {
        if let Some(Record {
            value: Value::SortedSet(set),
            ..
        }) = self.records.get(key)
        {
            if set.is_empty() {
                self.records.remove(key);
            }
        }
    }

    fn check_key(key: &[u8]) -> Result<(), EngineError> {
        if key.is_empty() {
            return Err(EngineError::Script("empty key".into()));
        }
        Ok(())
    }

    pub fn z_add(&mut self, key: &[u8], score: f64, member: &[u8]) -> Result<u64, EngineError> {
        Self::check_key(key)?;
        if score.is_nan() {
            return Err(EngineError::InvalidScore);
        }
        Ok(self.zset_or_insert(key)?.insert(member, score, false) as u64)
    }

    /// Adds a member that is the rendering of `score` itself. If a member
    /// with that rendering exists, `suffix` is appended to keep it unique.
    /// Returns the stored member, or `None` if both spellings are taken.
    pub fn z_add_stamp(&mut self, key: &[u8], score: f64, suffix: &[u8]) -> Result<Option<Vec<u8>>, EngineError> {
        Self::check_key(key)?;
        if score.is_nan() {
            return Err(EngineError::InvalidScore);
        }
        let set = self.zset_or_insert(key)?;
        let plain = render_score(score).into_bytes();
        if set.score(&plain).is_none() {
            set.insert(&plain, score, true);
            return Ok(Some(plain));
        }
        let mut tagged = plain;
        tagged.push(b'#');
        tagged.extend_from_slice(suffix);
        if set.score(&tagged).is_none() {
            set.insert(&tagged, score, true);
            return Ok(Some(tagged));
        }
        Ok(None)
    }

    pub fn z_score(&mut self, key: &[u8], member: &[u8]) -> Result<Option<f64>, EngineError> {
        Ok(self.zset(key)?.and_then(|s| s.score(member)))
    }

    pub fn z_card(&mut self, key: &[u8]) -> Result<u64, EngineError> {
        Ok(self.zset(key)?.map_or(0, |s| s.len() as u64))
    }

    pub fn z_rem_range_by_score(&mut self, key: &[u8], min: f64, max: f64) -> Result<u64, EngineError> {
        if min.is_nan() || max.is_nan() {
            return Err(EngineError::InvalidScore);
        }
        if min > max {
            return Ok(0);
        }
        let removed = self.zset(key)?.map_or(0, |s| s.remove_range_by_score(min, max));
        self.drop_if_empty(key);
        Ok(removed as u64)
    }

    pub fn z_range_with_scores(&mut self, key: &[u8], start: usize, stop: usize) -> Result<Vec<(Vec<u8>, f64)>, EngineError> {
        Ok(self.zset(key)?.map_or_else(Vec::new, |s| s.range(start, stop)))
    }

    pub fn z_rev_range_with_scores(
        &mut self,
        key: &[u8],
        start: usize,
        stop: usize,
    ) -> Result<Vec<(Vec<u8>, f64)>, EngineError> {
        Ok(self.zset(key)?.map_or_else(Vec::new, |s| s.rev_range(start, stop)))
    }

    pub fn z_rem(&mut self, key: &[u8], member: &[u8]) -> Result<u64, EngineError> {
        let removed = self.zset(key)?.is_some_and(|s| s.remove(member));
        self.drop_if_empty(key);
        Ok(removed as u64)
    }

    /// Sets the key to expire `ttl` seconds from now. False if the key is absent.
    pub fn expire(&mut self, key: &[u8], ttl: f64) -> Result<bool, EngineError> {
        if ttl.is_nan() {
            return Err(EngineError::InvalidScore);
        }
        let deadline = self.now + ttl;
        Ok(match self.live(key) {
            Some(record) => {
                record.expire_at = Some(deadline);
                true
            }
            None => false,
        })
    }

    /// Seconds until expiry; `None` if the key is absent or has no expiry.
    pub fn ttl(&mut self, key: &[u8]) -> Option<f64> {
        let now = self.now;
        self.live(key).and_then(|r| r.expire_at).map(|at| at - now)
    }

    pub fn exists(&mut self, key: &[u8]) -> bool {
        self.live(key).is_some()
    }

    pub fn del(&mut self, key: &[u8]) -> bool {
        self.live(key).is_some() && self.records.remove(key).is_some()
    }

    pub fn h_get(&mut self, key: &[u8], field: &[u8]) -> Result<Option<f64>, EngineError> {
        match self.live(key) {
            None => Ok(None),
            Some(Record {
                value: Value::Hash(fields),
                ..
            }) => Ok(fields.get(field).copied()),
            Some(_) => Err(EngineError::WrongType(key_name(key))),
        }
    }

    pub fn h_set(&mut self, key: &[u8], field: &[u8], value: f64) -> Result<(), EngineError> {
        Self::check_key(key)?;
        if self.live(key).is_none() {
            self.records.insert(
                key.to_vec(),
                Record {
                    value: Value::Hash(BTreeMap::new()),
                    expire_at: None,
                },
            );
        }
        match self.live(key) {
            Some(Record {
                value: Value::Hash(fields),
                ..
            }) => {
                fields.insert(field.to_vec(), value);
                Ok(())
            }
            _ => Err(EngineError::WrongType(key_name(key))),
        }
    }

    pub fn get_number(&mut self, key: &[u8]) -> Result<Option<f64>, EngineError> {
        match self.live(key) {
            None => Ok(None),
            Some(Record {
                value: Value::Number(v),
                ..
            }) => Ok(Some(*v)),
            Some(_) => Err(EngineError::WrongType(key_name(key))),
        }
    }

    /// Stores a number, keeping any existing expiry.
    pub fn set_number(&mut self, key: &[u8], value: f64) -> Result<(), EngineError> {
        Self::check_key(key)?;
        match self.live(key) {
            Some(Record {
                value: v @ Value::Number(_),
                ..
            }) => *v = Value::Number(value),
            Some(_) => return Err(EngineError::WrongType(key_name(key))),
            None => {
                self.records.insert(
                    key.to_vec(),
                    Record {
                        value: Value::Number(value),
                        expire_at: None,
                    },
                );
            }
        }
        Ok(())
    }

    fn sweep(&mut self) -> usize {
        let now = self.now;
        let before = self.records.len();
        self.records.retain(|_, r| Self::is_live(r, now));
        before - self.records.len()
    }

    fn live_records(&self) -> impl Iterator<Item = (&Vec<u8>, &Record)> {
        let now = self.now;
        self.records.iter().filter(move |(_, r)| Self::is_live(r, now))
    }
}

struct Inner {
    keyspace: Keyspace,
    loaded: BTreeMap<ScriptHash, (String, Procedure)>,
    command_count: u64,
}

/// An embedded store instance. Share it behind an `Arc`.
pub struct Engine {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    catalog: ScriptCatalog,
    available: AtomicBool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("catalog", &self.catalog)
            .field("stats", &self.stats())
            .finish()
    }
}

impl Engine {
    /// An engine whose catalog holds the built-in limiter procedures.
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_catalog(clock, crate::atomic::builtin_catalog())
    }

    pub fn with_catalog(clock: Arc<dyn Clock>, catalog: ScriptCatalog) -> Self {
        Self {
            inner: Mutex::new(Inner {
                keyspace: Keyspace::default(),
                loaded: BTreeMap::new(),
                command_count: 0,
            }),
            clock,
            catalog,
            available: AtomicBool::new(true),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Simulates an outage: while unavailable every command fails with
    /// [`EngineError::Unavailable`].
    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    /// Runs `f` on the keyspace as one serialized command.
    pub fn execute<R>(&self, f: impl FnOnce(&mut Keyspace) -> R) -> Result<R, EngineError> {
        if !self.is_available() {
            return Err(EngineError::Unavailable);
        }
        let mut inner = self.inner.lock();
        inner.command_count += 1;
        inner.keyspace.now = self.clock.now().max(inner.keyspace.now);
        Ok(f(&mut inner.keyspace))
    }

    fn execute_fallible<R>(&self, f: impl FnOnce(&mut Keyspace) -> Result<R, EngineError>) -> Result<R, EngineError> {
        self.execute(f)?
    }

    pub fn z_add(&self, key: &[u8], score: f64, member: &[u8]) -> Result<u64, EngineError> {
        self.execute_fallible(|ks| ks.z_add(key, score, member))
    }

    pub fn z_score(&self, key: &[u8], member: &[u8]) -> Result<Option<f64>, EngineError> {
        self.execute_fallible(|ks| ks.z_score(key, member))
    }

    pub fn z_card(&self, key: &[u8]) -> Result<u64, EngineError> {
        self.execute_fallible(|ks| ks.z_card(key))
    }

    pub fn z_rem_range_by_score(&self, key: &[u8], min: f64, max: f64) -> Result<u64, EngineError> {
        self.execute_fallible(|ks| ks.z_rem_range_by_score(key, min, max))
    }

    pub fn z_range_with_scores(&self, key: &[u8], start: usize, stop: usize) -> Result<Vec<(Vec<u8>, f64)>, EngineError> {
        self.execute_fallible(|ks| ks.z_range_with_scores(key, start, stop))
    }

    pub fn z_rev_range_with_scores(
        &self,
        key: &[u8],
        start: usize,
        stop: usize,
    ) -> Result<Vec<(Vec<u8>, f64)>, EngineError> {
        self.execute_fallible(|ks| ks.z_rev_range_with_scores(key, start, stop))
    }

    pub fn z_rem(&self, key: &[u8], member: &[u8]) -> Result<u64, EngineError> {
        self.execute_fallible(|ks| ks.z_rem(key, member))
    }

    pub fn expire(&self, key: &[u8], ttl: f64) -> Result<bool, EngineError> {
        self.execute_fallible(|ks| ks.expire(key, ttl))
    }

    pub fn ttl(&self, key: &[u8]) -> Result<Option<f64>, EngineError> {
        self.execute(|ks| ks.ttl(key))
    }

    pub fn exists(&self, key: &[u8]) -> Result<bool, EngineError> {
        self.execute(|ks| ks.exists(key))
    }

    pub fn del(&self, key: &[u8]) -> Result<bool, EngineError> {
        self.execute(|ks| ks.del(key))
    }

    pub fn h_get(&self, key: &[u8], field: &[u8]) -> Result<Option<f64>, EngineError> {
        self.execute_fallible(|ks| ks.h_get(key, field))
    }

    pub fn h_set(&self, key: &[u8], field: &[u8], value: f64) -> Result<(), EngineError> {
        self.execute_fallible(|ks| ks.h_set(key, field, value))
    }

    pub fn get_number(&self, key: &[u8]) -> Result<Option<f64>, EngineError> {
        self.execute_fallible(|ks| ks.get_number(key))
    }

    pub fn set_number(&self, key: &[u8], value: f64) -> Result<(), EngineError> {
        self.execute_fallible(|ks| ks.set_number(key, value))
    }

    /// Makes a catalog procedure callable by hash. Idempotent.
    pub fn load_script(&self, identifier: &str) -> Result<ScriptHash, EngineError> {
        let procedure = self
            .catalog
            .get(identifier)
            .ok_or_else(|| EngineError::UnknownProcedure(identifier.to_string()))?
            .clone();
        let hash = ScriptHash::of(identifier);
        let mut inner = self.inner.lock();
        inner
            .loaded
            .entry(hash.clone())
            .or_insert_with(|| (identifier.to_string(), procedure));
        Ok(hash)
    }

    /// Runs a loaded script atomically.
    pub fn eval_by_hash(&self, hash: &ScriptHash, keys: &[Vec<u8>], args: &[Vec<u8>]) -> Result<ScriptValue, EngineError> {
        if !self.is_available() {
            return Err(EngineError::Unavailable);
        }
        let mut inner = self.inner.lock();
        let procedure = match inner.loaded.get(hash) {
            Some((_, p)) => p.clone(),
            None => return Err(EngineError::NoScript(hash.clone())),
        };
        inner.command_count += 1;
        inner.keyspace.now = self.clock.now().max(inner.keyspace.now);
        procedure(&mut inner.keyspace, keys, args)
    }

    /// Loaded scripts as `(hash, identifier)`, ordered by hash.
    pub fn loaded_scripts(&self) -> Vec<(ScriptHash, String)> {
        self.inner
            .lock()
            .loaded
            .iter()
            .map(|(h, (id, _))| (h.clone(), id.clone()))
            .collect()
    }

    /// Drops every expired key now. Returns how many were reclaimed.
    pub fn sweep_expired(&self) -> usize {
        let mut inner = self.inner.lock();
        inner.keyspace.now = self.clock.now().max(inner.keyspace.now);
        inner.keyspace.sweep()
    }

    pub fn stats(&self) -> EngineStats {
        let mut inner = self.inner.lock();
        inner.keyspace.now = self.clock.now().max(inner.keyspace.now);
        let (key_count, logical_bytes) = inner
            .keyspace
            .live_records()
            .fold((0, 0), |(n, b), (_, r)| (n + 1, b + r.value.logical_bytes()));
        EngineStats {
            key_count,
            logical_bytes,
            command_count: inner.command_count,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut inner = self.inner.lock();
        inner.keyspace.now = self.clock.now().max(inner.keyspace.now);
        inner
            .keyspace
            .live_records()
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect()
    }

    /// Replaces this engine's data with `snapshot`. Loaded scripts are kept.
    pub fn restore(&self, snapshot: Snapshot) {
        let mut inner = self.inner.lock();
        inner.keyspace.records = snapshot.into_iter().collect();
    }

    /// The live record under `key`, including its absolute expiry.
    pub fn dump_key(&self, key: &[u8]) -> Result<Option<Record>, EngineError> {
        self.execute(|ks| ks.live(key).cloned())
    }

    /// Sets `key` to `record` exactly, or deletes it when `record` is `None`.
    pub fn restore_key(&self, key: &[u8], record: Option<Record>) -> Result<(), EngineError> {
        self.execute(|ks| match record {
            Some(record) => {
                ks.records.insert(key.to_vec(), record);
            }
            None => {
                ks.records.remove(key);
            }
        })
    }

    /// An independent engine with a copy of this one's data and scripts,
    /// sharing the same clock.
    pub fn fork(&self) -> Engine {
        let inner = self.inner.lock();
        Engine {
            inner: Mutex::new(Inner {
                keyspace: Keyspace {
                    records: inner.keyspace.records.clone(),
                    now: inner.keyspace.now,
                },
                loaded: inner.loaded.clone(),
                command_count: 0,
            }),
            clock: self.clock.clone(),
            catalog: self.catalog.clone(),
            available: AtomicBool::new(true),
        }
    }
}

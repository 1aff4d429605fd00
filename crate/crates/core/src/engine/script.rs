use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::{EngineError, Keyspace};

/// Hex SHA-1 digest identifying a loaded script.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptHash(String);

impl ScriptHash {
    /// Digest of a script's canonical identifier. Stable across processes.
    pub fn of(identifier: &str) -> Self {
        Self(hex::encode(Sha1::digest(identifier.as_bytes())))
    }

    pub fn from_hex(s: &str) -> Self {
        Self(s.to_ascii_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ScriptHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Value returned by a script.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptValue {
    Nil,
    Int(i64),
    Float(f64),
    Bytes(Vec<u8>),
    Array(Vec<ScriptValue>),
}

impl ScriptValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ScriptValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            ScriptValue::Float(f) => Some(*f),
            ScriptValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            ScriptValue::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[ScriptValue]> {
        match self {
            ScriptValue::Array(a) => Some(a),
            _ => None,
        }
    }
}

/// A native procedure run atomically by the engine. Receives the keyspace,
/// the key arguments and the plain arguments.
pub type Procedure =
    Arc<dyn Fn(&mut Keyspace, &[Vec<u8>], &[Vec<u8>]) -> Result<ScriptValue, EngineError> + Send + Sync>;

/// Procedures available for loading, by canonical identifier.
#[derive(Clone, Default)]
pub struct ScriptCatalog {
    procedures: BTreeMap<String, Procedure>,
}

impl ScriptCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, identifier: impl Into<String>, procedure: Procedure) {
        self.procedures.insert(identifier.into(), procedure);
    }

    pub fn get(&self, identifier: &str) -> Option<&Procedure> {
        self.procedures.get(identifier)
    }

    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        self.procedures.keys().map(String::as_str)
    }
}

impl fmt::Debug for ScriptCatalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.procedures.keys()).finish()
    }
}

/// Parses a script argument rendered as a decimal number.
pub fn arg_f64(args: &[Vec<u8>], i: usize, name: &str) -> Result<f64, EngineError> {
    let raw = args
        .get(i)
        .ok_or_else(|| EngineError::Script(format!("missing argument {name}")))?;
    std::str::from_utf8(raw)
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|v| !v.is_nan())
        .ok_or_else(|| EngineError::Script(format!("argument {name} is not a number")))
}

pub fn arg_u64(args: &[Vec<u8>], i: usize, name: &str) -> Result<u64, EngineError> {
    let raw = args
        .get(i)
        .ok_or_else(|| EngineError::Script(format!("missing argument {name}")))?;
    std::str::from_utf8(raw)
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| EngineError::Script(format!("argument {name} is not an integer")))
}

pub fn arg_bytes<'a>(args: &'a [Vec<u8>], i: usize, name: &str) -> Result<&'a [u8], EngineError> {
    args.get(i)
        .map(Vec::as_slice)
        .ok_or_else(|| EngineError::Script(format!("missing argument {name}")))
}

pub fn key_arg<'a>(keys: &'a [Vec<u8>], i: usize) -> Result<&'a [u8], EngineError> {
    keys.get(i)
        .map(Vec::as_slice)
        .ok_or_else(|| EngineError::Script(format!("missing key {i}")))
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slot::{slot_for_key, DEFAULT_NUM_SLOTS};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardConfig {
    pub leader: NodeId,
    #[serde(default)]
    pub replicas: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    /// The leader acknowledges first and replicates after a delay.
    #[default]
    Async,
    /// The leader acknowledges only after every reachable replica applied the write.
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConsistencyMode {
    /// Partitioned leaders keep accepting writes.
    #[default]
    #[serde(rename = "AP", alias = "ap")]
    Ap,
    /// Only a leader that can reach a majority of nodes accepts writes, and it
    /// replicates synchronously.
    #[serde(rename = "CP", alias = "cp")]
    Cp,
}

/// Bounds of the uniformly distributed asynchronous replication delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationLag {
    pub min: f64,
    pub max: f64,
}

impl Default for ReplicationLag {
    fn default() -> Self {
        Self { min: 0.25, max: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "default_num_slots")]
    pub num_slots: u32,
    pub shards: Vec<ShardConfig>,
    #[serde(default)]
    pub replication_mode: ReplicationMode,
    #[serde(default)]
    pub consistency_mode: ConsistencyMode,
    #[serde(default = "default_failover_timeout")]
    pub failover_timeout: f64,
    #[serde(default)]
    pub replication_lag: ReplicationLag,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_num_slots() -> u32 {
    DEFAULT_NUM_SLOTS
}

fn default_failover_timeout() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cluster needs at least one shard")]
    NoShards,
    #[error("num_slots must be at least the number of shards")]
    TooFewSlots,
    #[error("node {0} is configured more than once")]
    DuplicateNode(NodeId),
    #[error("failover_timeout must be positive")]
    FailoverTimeout,
    #[error("replication lag needs 0 < min <= max")]
    ReplicationLag,
    #[error("shard {0} has no replica to fail over to")]
    NoReplica(usize),
}

impl ClusterConfig {
    /// `shards` shards, each with one leader and `replicas` replicas. Node ids
    /// are assigned shard by shard, leader first.
    pub fn uniform(shards: usize, replicas: usize) -> Self {
        let per_shard = 1 + replicas as NodeId;
        Self {
            num_slots: DEFAULT_NUM_SLOTS,
            shards: (0..shards as NodeId)
                .map(|s| ShardConfig {
                    leader: s * per_shard,
                    replicas: (1..per_shard).map(|r| s * per_shard + r).collect(),
                })
                .collect(),
            replication_mode: ReplicationMode::Async,
            consistency_mode: ConsistencyMode::Ap,
            failover_timeout: default_failover_timeout(),
            replication_lag: ReplicationLag::default(),
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_replication(mut self, mode: ReplicationMode) -> Self {
        self.replication_mode = mode;
        self
    }

    pub fn with_consistency(mut self, mode: ConsistencyMode) -> Self {
        self.consistency_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.shards.is_empty() {
            return Err(ConfigError::NoShards);
        }
        if (self.num_slots as usize) < self.shards.len() {
            return Err(ConfigError::TooFewSlots);
        }
        let mut seen = BTreeSet::new();
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.replicas.is_empty() {
                return Err(ConfigError::NoReplica(i));
            }
            for &node in std::iter::once(&shard.leader).chain(&shard.replicas) {
                if !seen.insert(node) {
                    return Err(ConfigError::DuplicateNode(node));
                }
            }
        }
        if !(self.failover_timeout > 0.0) {
            return Err(ConfigError::FailoverTimeout);
        }
        let lag = self.replication_lag;
        if !(lag.min > 0.0 && lag.min <= lag.max && lag.max.is_finite()) {
            return Err(ConfigError::ReplicationLag);
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.shards.iter().map(|s| 1 + s.replicas.len()).sum()
    }

    /// Shard owning `slot`. Shards own contiguous, equally sized slot ranges.
    pub fn shard_for_slot(&self, slot: u32) -> usize {
        let shards = self.shards.len() as u64;
        ((u64::from(slot) * shards) / u64::from(self.num_slots)) as usize
    }

    pub fn shard_for_key(&self, key: &[u8]) -> usize {
        self.shard_for_slot(slot_for_key(key, self.num_slots))
    }

    /// Whether acknowledgements wait for replication.
    pub fn synchronous(&self) -> bool {
        self.replication_mode == ReplicationMode::Sync || self.consistency_mode == ConsistencyMode::Cp
    }
}

//! A deterministic simulator of a sharded leader-replica cluster of limitd
//! engines: hash slot routing, asynchronous replication, leader crashes,
//! partitions with split brain, replica promotion, and the write loss and
//! rate limit drift they cause under AP and CP postures.

pub mod config;
pub mod scenario;
pub mod sim;
pub mod slot;

pub use config::{ClusterConfig, ConsistencyMode, NodeId, ReplicationLag, ReplicationMode, ShardConfig};
pub use scenario::{drift, leader_crash, split_brain, DriftSpec, ScenarioFile, ScenarioResult, SplitBrainSpec};
pub use sim::{DriftReport, Fault, Op, RouteError, SimEvent, Simulator};
pub use slot::{hash_tag, slot_for_key, DEFAULT_NUM_SLOTS};

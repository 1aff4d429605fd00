//! Discrete-event simulation of a sharded leader-replica cluster.
//!
//! Every node owns an [`Engine`]. Writes are applied on the shard leader and
//! shipped to replicas as the resulting key record (state-based replication),
//! so a replica that applied the same prefix of records holds exactly the
//! leader's data. Simulated time only advances through the event queue;
//! identical inputs and seed give identical event logs and reports.
//!
//! Model, per shard:
//! - Asynchronous replication delivers each record after a delay drawn
//!   uniformly from the configured lag range, FIFO per leader/replica link.
//!   A crash discards the leader's undelivered records.
//! - A record that cannot be delivered (partition, dead or reassigned
//!   replica) marks the replica stale; stale replicas resynchronize with a
//!   full copy of their leader once they can reach it again.
//! - When the leader crashes or is cut off from the majority, a failover
//!   check runs `failover_timeout` later. If the shard still has no leader on
//!   the majority side, the reachable replica with the most applied writes is
//!   promoted under a new epoch.
//! - On heal, every leader but the highest epoch one is demoted and resynced,
//!   discarding whatever it accepted while partitioned.
//! - A client with no visible leader buffers the operation and retries after
//!   the next promotion, heal or recovery. In CP mode a client outside the
//!   majority partition is refused instead.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use limitd_core::atomic::{decode_reply, AtomicLimiter, LimitError, LimitKey, ScriptOutcome};
use limitd_core::engine::{Engine, EngineError, Record};
use limitd_core::limiter::{rolling_window_allow, RollingWindowState};
use limitd_core::{Algorithm, Clock, ManualClock, RuleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ClusterConfig, ConfigError, ConsistencyMode, NodeId};

pub type WriteId = u64;
pub type Group = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Replica,
}

/// A client operation against the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// Adds a uniquely named member scored with the current time.
    Write { key: String },
    /// A rolling window check of the simulator's limit for `key`.
    Check { key: String },
    /// Reads the member count of `key` from the leader.
    Read { key: String },
}

impl Op {
    pub fn key(&self) -> &str {
        match self {
            Op::Write { key } | Op::Check { key } | Op::Read { key } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    Crash { node: NodeId },
    /// Crashes whichever node currently leads the shard owning `key`.
    CrashLeader { key: String },
    Recover { node: NodeId },
    /// Moves the listed nodes to partition group 1 and every other node to 0.
    Partition { minority: Vec<NodeId> },
    /// Partitions the current leader of `key`'s shard away from every other node.
    IsolateLeader { key: String },
    Heal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ClientWrite,
    Check,
    Ack,
    Replicate,
    Drop,
    Resync,
    Crash,
    Recover,
    Promote,
    Demote,
    Partition,
    Heal,
    Read,
    Buffer,
    Reject,
}

/// One entry of the simulation log, totally ordered by `seq`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub node: Option<NodeId>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOutcome {
    Allowed,
    Denied,
    /// Refused by the cluster (CP mode, client outside the majority).
    Rejected,
}

/// A decided limit check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub time: f64,
    pub key: String,
    pub group: Group,
    pub outcome: CheckOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AckedWrite {
    pub id: WriteId,
    pub shard: usize,
    pub group: Group,
}

/// Loss and over-admission accounting of one run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct DriftReport {
    pub acknowledged_writes: u64,
    pub surviving_writes: u64,
    pub lost_writes: u64,
    /// Admitted checks minus the single-node oracle's admissions over the
    /// same non-rejected checks.
    pub over_admitted_requests: i64,
    pub rejected_during_partition: u64,
    pub admitted_requests: u64,
    pub oracle_admitted_requests: u64,
    pub promotions: u64,
    /// Acknowledged writes per client partition group.
    pub acked_by_group: BTreeMap<Group, u64>,
    /// Attempted writes and checks per client partition group.
    pub attempted_by_group: BTreeMap<Group, u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("check operations need a rolling window limit")]
    NoLimit,
    #[error("limit must use the rolling window algorithm, got {0}")]
    NotRollingWindow(Algorithm),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Limit(#[from] LimitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteError {
    /// No leader for the shard is reachable from the client's group.
    NoLeader,
    /// CP mode: the client's group does not hold a majority of nodes.
    NoQuorum,
}

#[derive(Debug, Clone)]
struct WriteRecord {
    id: WriteId,
    key: Vec<u8>,
    state: Option<Record>,
}

#[derive(Debug, Clone)]
struct Outgoing {
    to: NodeId,
    record: WriteRecord,
}

pub struct SimNode {
    pub id: NodeId,
    pub shard: usize,
    pub role: Role,
    /// The leader this replica applies records from.
    pub following: Option<NodeId>,
    pub epoch: u64,
    pub engine: Engine,
    pub applied: BTreeSet<WriteId>,
    pub alive: bool,
    pub partition_group: Group,
    /// Shipped but not yet delivered records, oldest first.
    replication_queue: VecDeque<Outgoing>,
    stale: bool,
}

impl SimNode {
    pub fn pending_replication(&self) -> usize {
        self.replication_queue.len()
    }
}

#[derive(Debug, Clone)]
enum Action {
    Op { group: Group, op: Op },
    Fault(Fault),
    Replicate { from: NodeId, to: NodeId, id: WriteId },
    FailoverCheck { shard: usize },
}

struct Scheduled {
    time: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

const MAX_MEMBER_ATTEMPTS: usize = 8;

pub struct Simulator {
    config: ClusterConfig,
    clock: Arc<ManualClock>,
    nodes: BTreeMap<NodeId, SimNode>,
    queue: BinaryHeap<Scheduled>,
    next_seq: u64,
    rng: ChaCha8Rng,
    link_clock: BTreeMap<(NodeId, NodeId), f64>,
    log: Vec<SimEvent>,
    next_write: WriteId,
    acked: Vec<AckedWrite>,
    buffered: Vec<(Group, Op)>,
    limit: Option<RuleParams>,
    limiter: AtomicLimiter,
    checks: Vec<CheckRecord>,
    rejected: u64,
    promotions: u64,
    attempted: BTreeMap<Group, u64>,
}

impl Simulator {
    pub fn new(config: ClusterConfig) -> Result<Self, SimError> {
        config.validate()?;
        let clock = Arc::new(ManualClock::new(0.0));
        let mut nodes = BTreeMap::new();
        for (shard, cfg) in config.shards.iter().enumerate() {
            for &id in std::iter::once(&cfg.leader).chain(&cfg.replicas) {
                let engine = Engine::new(clock.clone());
                for identifier in limitd_core::atomic::builtin_catalog().identifiers() {
                    engine.load_script(identifier)?;
                }
                let leader = id == cfg.leader;
                nodes.insert(
                    id,
                    SimNode {
                        id,
                        shard,
                        role: if leader { Role::Leader } else { Role::Replica },
                        following: (!leader).then_some(cfg.leader),
                        epoch: 0,
                        engine,
                        applied: BTreeSet::new(),
                        alive: true,
                        partition_group: 0,
                        replication_queue: VecDeque::new(),
                        stale: false,
                    },
                );
            }
        }
        // The limiter only builds script calls; its engine is never queried.
        let limiter = AtomicLimiter::with_seed(Arc::new(Engine::new(clock.clone())), config.rng_seed ^ 0x5eed)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            clock,
            nodes,
            queue: BinaryHeap::new(),
            next_seq: 0,
            link_clock: BTreeMap::new(),
            log: Vec::new(),
            next_write: 1,
            acked: Vec::new(),
            buffered: Vec::new(),
            limit: None,
            limiter,
            checks: Vec::new(),
            rejected: 0,
            promotions: 0,
            attempted: BTreeMap::new(),
        })
    }

    /// Sets the rolling window limit enforced by [`Op::Check`].
    pub fn with_limit(mut self, params: RuleParams) -> Result<Self, SimError> {
        if params.algorithm != Algorithm::RollingWindow {
            return Err(SimError::NotRollingWindow(params.algorithm));
        }
        params.validate().map_err(LimitError::from)?;
        self.limit = Some(params);
        Ok(self)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn node(&self, id: NodeId) -> Option<&SimNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.values()
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.log
    }

    pub fn checks(&self) -> &[CheckRecord] {
        &self.checks
    }

    pub fn acked_writes(&self) -> &[AckedWrite] {
        &self.acked
    }

    pub fn schedule_op(&mut self, at: f64, group: Group, op: Op) -> Result<(), SimError> {
        if matches!(op, Op::Check { .. }) && self.limit.is_none() {
            return Err(SimError::NoLimit);
        }
        self.push(at, Action::Op { group, op });
        Ok(())
    }

    pub fn schedule_fault(&mut self, at: f64, fault: Fault) -> Result<(), SimError> {
        if let Fault::Crash { node } | Fault::Recover { node } = fault {
            self.nodes.get(&node).ok_or(SimError::UnknownNode(node))?;
        }
        if let Fault::Partition { minority } = &fault {
            if let Some(&bad) = minority.iter().find(|n| !self.nodes.contains_key(n)) {
                return Err(SimError::UnknownNode(bad));
            }
        }
        self.push(at, Action::Fault(fault));
        Ok(())
    }

    fn push(&mut self, at: f64, action: Action) {
        let time = at.max(self.clock.now());
        self.queue.push(Scheduled {
            time,
            seq: self.next_seq,
            action,
        });
        self.next_seq += 1;
    }

    /// Processes events until the queue is empty.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_until(f64::INFINITY)
    }

    /// Processes every event scheduled at or before `until`.
    pub fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        while self.queue.peek().is_some_and(|s| s.time <= until) {
            let Scheduled { time, action, .. } = self.queue.pop().expect("peeked");
            self.clock.set(time);
            match action {
                Action::Op { group, op } => {
                    if matches!(op, Op::Write { .. } | Op::Check { .. }) {
                        *self.attempted.entry(group).or_default() += 1;
                    }
                    self.handle_op(group, op)?;
                }
                Action::Fault(fault) => self.handle_fault(fault)?,
                Action::Replicate { from, to, id } => self.handle_replicate(from, to, id)?,
                Action::FailoverCheck { shard } => self.handle_failover_check(shard)?,
            }
        }
        if until.is_finite() {
            self.clock.set(until);
        }
        Ok(())
    }

    fn log(&mut self, kind: EventKind, node: Option<NodeId>, detail: impl Into<String>) {
        let seq = self.log.len() as u64;
        self.log.push(SimEvent {
            time: self.clock.now(),
            seq,
            kind,
            node,
            detail: detail.into(),
        });
    }

    fn storage_key(&self, op: &Op) -> Result<String, SimError> {
        Ok(match op {
            Op::Check { key } => LimitKey::rate_limiter(key.as_str())?.render(),
            Op::Write { key } | Op::Read { key } => key.clone(),
        })
    }

    fn group_size(&self, group: Group) -> usize {
        self.nodes
            .values()
            .filter(|n| n.alive && n.partition_group == group)
            .count()
    }

    fn is_majority(&self, group: Group) -> bool {
        2 * self.group_size(group) > self.nodes.len()
    }

    /// The partition group holding a strict majority of configured nodes.
    pub fn majority_group(&self) -> Option<Group> {
        let groups: BTreeSet<Group> = self.nodes.values().map(|n| n.partition_group).collect();
        groups.into_iter().find(|&g| self.is_majority(g))
    }

    fn leader_in_group(&self, shard: usize, group: Group) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.shard == shard && n.alive && n.role == Role::Leader && n.partition_group == group)
            .max_by_key(|n| (n.epoch, std::cmp::Reverse(n.id)))
            .map(|n| n.id)
    }

    /// The live leader with the highest epoch, wherever it is.
    pub fn leader_of(&self, shard: usize) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.shard == shard && n.alive && n.role == Role::Leader)
            .max_by_key(|n| (n.epoch, std::cmp::Reverse(n.id)))
            .map(|n| n.id)
    }

    /// Node that serves `key` for a client in `group`.
    pub fn route(&self, key: &[u8], group: Group) -> Result<NodeId, RouteError> {
        if self.config.consistency_mode == ConsistencyMode::Cp && !self.is_majority(group) {
            return Err(RouteError::NoQuorum);
        }
        self.leader_in_group(self.config.shard_for_key(key), group)
            .ok_or(RouteError::NoLeader)
    }

    fn handle_op(&mut self, group: Group, op: Op) -> Result<(), SimError> {
        let key = self.storage_key(&op)?;
        let leader = match self.route(key.as_bytes(), group) {
            Ok(leader) => leader,
            Err(RouteError::NoQuorum) => {
                self.log(EventKind::Reject, None, format!("group {group} {op:?}"));
                match op {
                    Op::Read { .. } => {}
                    Op::Write { .. } => self.rejected += 1,
                    Op::Check { key } => {
                        self.rejected += 1;
                        self.checks.push(CheckRecord {
                            time: self.clock.now(),
                            key,
                            group,
                            outcome: CheckOutcome::Rejected,
                        });
                    }
                }
                return Ok(());
            }
            Err(RouteError::NoLeader) => {
                self.log(EventKind::Buffer, None, format!("group {group} {op:?}"));
                self.buffered.push((group, op));
                return Ok(());
            }
        };

        match op {
            Op::Write { .. } => {
                self.log(EventKind::ClientWrite, Some(leader), format!("group {group} key {key}"));
                let id = self.next_write;
                self.next_write += 1;
                let node = &self.nodes[&leader];
                node.engine.z_add(key.as_bytes(), self.clock.now(), format!("w{id}").as_bytes())?;
                self.commit(leader, group, id, key.into_bytes())?;
            }
            Op::Check { key: user_key } => {
                let params = self.limit.ok_or(SimError::NoLimit)?;
                let limit_key = LimitKey::rate_limiter(user_key.as_str())?;
                let now = self.clock.now();
                let mut decision = None;
                for _ in 0..MAX_MEMBER_ATTEMPTS {
                    let call = self.limiter.rolling_window_call(&limit_key, &params, now);
                    match decode_reply(&call.run(&self.nodes[&leader].engine)?)? {
                        ScriptOutcome::Decided { decision: d, .. } => {
                            decision = Some(d);
                            break;
                        }
                        ScriptOutcome::Duplicate => continue,
                    }
                }
                let decision = decision.ok_or(LimitError::Collision(MAX_MEMBER_ATTEMPTS))?;
                let outcome = if decision.allowed {
                    CheckOutcome::Allowed
                } else {
                    CheckOutcome::Denied
                };
                self.log(EventKind::Check, Some(leader), format!("group {group} key {key} {outcome:?}"));
                self.checks.push(CheckRecord {
                    time: now,
                    key: user_key,
                    group,
                    outcome,
                });
                if decision.allowed {
                    let id = self.next_write;
                    self.next_write += 1;
                    self.commit(leader, group, id, key.into_bytes())?;
                }
            }
            Op::Read { .. } => {
                let count = self.nodes[&leader].engine.z_card(key.as_bytes())?;
                self.log(EventKind::Read, Some(leader), format!("group {group} key {key} count {count}"));
            }
        }
        Ok(())
    }

    /// Records write `id` on `leader`, replicates it and acknowledges it.
    fn commit(&mut self, leader: NodeId, group: Group, id: WriteId, key: Vec<u8>) -> Result<(), SimError> {
        let node = self.nodes.get_mut(&leader).expect("routed to a known node");
        node.applied.insert(id);
        let record = WriteRecord {
            id,
            state: node.engine.dump_key(&key)?,
            key,
        };
        let shard = node.shard;
        let leader_group = node.partition_group;
        let followers: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.role == Role::Replica && n.following == Some(leader))
            .map(|n| n.id)
            .collect();

        if self.config.synchronous() {
            for f in followers {
                let follower = self.nodes.get_mut(&f).expect("follower exists");
                if follower.alive && follower.partition_group == leader_group && !follower.stale {
                    apply(follower, &record)?;
                    self.log(EventKind::Replicate, Some(f), format!("write {id} from {leader}"));
                } else {
                    follower.stale = true;
                }
            }
        } else {
            let lag = self.config.replication_lag;
            for f in followers {
                let delay = self.rng.random_range(lag.min..=lag.max);
                let link = self.link_clock.entry((leader, f)).or_insert(f64::NEG_INFINITY);
                let at = (self.clock.now() + delay).max(*link);
                *link = at;
                self.nodes
                    .get_mut(&leader)
                    .expect("leader exists")
                    .replication_queue
                    .push_back(Outgoing {
                        to: f,
                        record: record.clone(),
                    });
                self.push(at, Action::Replicate { from: leader, to: f, id });
            }
        }

        self.acked.push(AckedWrite { id, shard, group });
        self.log(EventKind::Ack, Some(leader), format!("write {id}"));
        Ok(())
    }

    fn handle_replicate(&mut self, from: NodeId, to: NodeId, id: WriteId) -> Result<(), SimError> {
        let sender = self.nodes.get_mut(&from).expect("sender exists");
        let Some(pos) = sender
            .replication_queue
            .iter()
            .position(|o| o.to == to && o.record.id == id)
        else {
            // Discarded by a crash or superseded by a resync.
            return Ok(());
        };
        let outgoing = sender.replication_queue.remove(pos).expect("position is valid");
        let sender_group = sender.partition_group;
        let sender_ok = sender.alive && sender.role == Role::Leader;

        let receiver = self.nodes.get_mut(&to).expect("receiver exists");
        let follows = receiver.role == Role::Replica && receiver.following == Some(from);
        if sender_ok && follows && receiver.alive && receiver.partition_group == sender_group && !receiver.stale {
            apply(receiver, &outgoing.record)?;
            self.log(EventKind::Replicate, Some(to), format!("write {id} from {from}"));
        } else {
            if follows {
                receiver.stale = true;
            }
            self.log(EventKind::Drop, Some(to), format!("write {id} from {from}"));
        }
        Ok(())
    }

    fn handle_fault(&mut self, fault: Fault) -> Result<(), SimError> {
        match fault {
            Fault::Crash { node } => self.crash(node),
            Fault::CrashLeader { key } => {
                let shard = self.config.shard_for_key(self.limit_aware_key(&key).as_bytes());
                match self.leader_of(shard) {
                    Some(leader) => self.crash(leader),
                    None => {
                        self.log(EventKind::Crash, None, format!("shard {shard} has no live leader"));
                        Ok(())
                    }
                }
            }
            Fault::Recover { node } => self.recover(node),
            Fault::Partition { minority } => {
                let minority: BTreeSet<NodeId> = minority.into_iter().collect();
                for node in self.nodes.values_mut() {
                    node.partition_group = Group::from(minority.contains(&node.id));
                }
                self.log(EventKind::Partition, None, format!("minority {minority:?}"));
                self.after_partition();
                Ok(())
            }
            Fault::IsolateLeader { key } => {
                let shard = self.config.shard_for_key(self.limit_aware_key(&key).as_bytes());
                let leader = self.leader_of(shard);
                for node in self.nodes.values_mut() {
                    node.partition_group = Group::from(Some(node.id) == leader);
                }
                self.log(EventKind::Partition, leader, format!("isolated leader of shard {shard}"));
                self.after_partition();
                Ok(())
            }
            Fault::Heal => self.heal(),
        }
    }

    /// Keys in faults name the user key; checks store under the limiter's
    /// namespaced key, which shares its hash tag only if the user key has one.
    fn limit_aware_key(&self, key: &str) -> String {
        if self.limit.is_some() {
            LimitKey::rate_limiter(key).map(|k| k.render()).unwrap_or_else(|_| key.to_string())
        } else {
            key.to_string()
        }
    }

    fn crash(&mut self, id: NodeId) -> Result<(), SimError> {
        let node = self.nodes.get_mut(&id).ok_or(SimError::UnknownNode(id))?;
        if !node.alive {
            return Ok(());
        }
        node.alive = false;
        let dropped = node.replication_queue.len();
        node.replication_queue.clear();
        let (shard, was_leader) = (node.shard, node.role == Role::Leader);
        self.log(EventKind::Crash, Some(id), format!("{dropped} undelivered records discarded"));
        if was_leader {
            self.push(self.clock.now() + self.config.failover_timeout, Action::FailoverCheck { shard });
        }
        Ok(())
    }

    fn after_partition(&mut self) {
        let majority = self.majority_group();
        for shard in 0..self.config.shards.len() {
            let healthy = majority.is_some_and(|g| self.leader_in_group(shard, g).is_some());
            if !healthy {
                self.push(self.clock.now() + self.config.failover_timeout, Action::FailoverCheck { shard });
            }
        }
    }

    fn handle_failover_check(&mut self, shard: usize) -> Result<(), SimError> {
        let Some(majority) = self.majority_group() else {
            return Ok(());
        };
        if self.leader_in_group(shard, majority).is_some() {
            return Ok(());
        }
        let Some(candidate) = self
            .nodes
            .values()
            .filter(|n| n.shard == shard && n.alive && n.role == Role::Replica && n.partition_group == majority)
            .max_by_key(|n| (n.applied.len(), std::cmp::Reverse(n.id)))
            .map(|n| n.id)
        else {
            return Ok(());
        };
        let epoch = 1 + self
            .nodes
            .values()
            .filter(|n| n.shard == shard)
            .map(|n| n.epoch)
            .max()
            .unwrap_or(0);

        for node in self.nodes.values_mut().filter(|n| n.shard == shard) {
            if node.id == candidate {
                node.role = Role::Leader;
                node.following = None;
                node.epoch = epoch;
                node.stale = false;
            } else if node.role == Role::Replica || !node.alive {
                // A dead old leader rejoins as a replica when it recovers; a
                // live one on the other side stays leader until the heal.
                node.role = Role::Replica;
                node.following = Some(candidate);
                node.stale = true;
            }
        }
        self.promotions += 1;
        let applied = self.nodes[&candidate].applied.len();
        self.log(
            EventKind::Promote,
            Some(candidate),
            format!("shard {shard} epoch {epoch} with {applied} applied writes"),
        );
        self.reconcile()?;
        self.flush_buffered()
    }

    fn heal(&mut self) -> Result<(), SimError> {
        for node in self.nodes.values_mut() {
            node.partition_group = 0;
        }
        self.log(EventKind::Heal, None, "");
        for shard in 0..self.config.shards.len() {
            let Some(winner) = self.leader_of(shard) else {
                continue;
            };
            let losers: Vec<NodeId> = self
                .nodes
                .values()
                .filter(|n| n.shard == shard && n.role == Role::Leader && n.id != winner)
                .map(|n| n.id)
                .collect();
            for id in losers {
                let node = self.nodes.get_mut(&id).expect("loser exists");
                node.role = Role::Replica;
                node.following = Some(winner);
                node.stale = true;
                node.replication_queue.clear();
                self.log(EventKind::Demote, Some(id), format!("follows {winner}"));
            }
        }
        self.reconcile()?;
        self.flush_buffered()
    }

    fn recover(&mut self, id: NodeId) -> Result<(), SimError> {
        let node = self.nodes.get(&id).ok_or(SimError::UnknownNode(id))?;
        if node.alive {
            return Ok(());
        }
        let shard = node.shard;
        let current = self.leader_of(shard);
        let node = self.nodes.get_mut(&id).expect("checked above");
        node.alive = true;
        if node.role == Role::Leader && current.is_some() {
            node.role = Role::Replica;
            node.following = current;
        }
        if node.role == Role::Replica {
            node.stale = true;
        }
        self.log(EventKind::Recover, Some(id), "");
        self.reconcile()?;
        self.flush_buffered()
    }

    /// Resynchronizes every stale replica that can reach its leader.
    fn reconcile(&mut self) -> Result<(), SimError> {
        let stale: Vec<(NodeId, NodeId)> = self
            .nodes
            .values()
            .filter(|n| n.alive && n.stale && n.role == Role::Replica)
            .filter_map(|n| n.following.map(|l| (n.id, l)))
            .filter(|&(id, leader)| {
                let l = &self.nodes[&leader];
                l.alive && l.role == Role::Leader && l.partition_group == self.nodes[&id].partition_group
            })
            .collect();
        for (id, leader) in stale {
            let (snapshot, applied) = {
                let l = self.nodes.get_mut(&leader).expect("leader exists");
                l.replication_queue.retain(|o| o.to != id);
                (l.engine.snapshot(), l.applied.clone())
            };
            let node = self.nodes.get_mut(&id).expect("replica exists");
            node.engine.restore(snapshot);
            node.applied = applied;
            node.stale = false;
            self.log(EventKind::Resync, Some(id), format!("from {leader}"));
        }
        Ok(())
    }

    fn flush_buffered(&mut self) -> Result<(), SimError> {
        for (group, op) in std::mem::take(&mut self.buffered) {
            self.handle_op(group, op)?;
        }
        Ok(())
    }

    /// Operations still waiting for a reachable leader.
    pub fn buffered(&self) -> usize {
        self.buffered.len()
    }

    /// True when no replication is in flight, no partition is active, and
    /// every live replica holds exactly its leader's data.
    pub fn replicas_consistent(&self) -> bool {
        self.nodes.values().filter(|n| n.alive && n.role == Role::Replica).all(|n| {
            let Some(leader) = n.following.and_then(|l| self.nodes.get(&l)) else {
                return false;
            };
            leader.alive
                && leader.role == Role::Leader
                && leader.replication_queue.is_empty()
                && n.applied == leader.applied
                && n.engine.snapshot() == leader.engine.snapshot()
        })
    }

    pub fn report(&self) -> DriftReport {
        let mut report = DriftReport {
            acknowledged_writes: self.acked.len() as u64,
            rejected_during_partition: self.rejected,
            promotions: self.promotions,
            attempted_by_group: self.attempted.clone(),
            ..DriftReport::default()
        };
        let finals: Vec<Option<&SimNode>> = (0..self.config.shards.len())
            .map(|s| self.leader_of(s).map(|id| &self.nodes[&id]))
            .collect();
        for write in &self.acked {
            *report.acked_by_group.entry(write.group).or_default() += 1;
            if finals[write.shard].is_some_and(|l| l.applied.contains(&write.id)) {
                report.surviving_writes += 1;
            }
        }
        report.lost_writes = report.acknowledged_writes - report.surviving_writes;

        if let Some(params) = self.limit {
            let mut states: BTreeMap<&str, RollingWindowState> = BTreeMap::new();
            for check in &self.checks {
                match check.outcome {
                    CheckOutcome::Rejected => continue,
                    CheckOutcome::Allowed => report.admitted_requests += 1,
                    CheckOutcome::Denied => {}
                }
                let state = states.remove(check.key.as_str()).unwrap_or_default();
                let (decision, next) =
                    rolling_window_allow(state, &params, check.time).expect("limit validated on construction");
                states.insert(&check.key, next);
                if decision.allowed {
                    report.oracle_admitted_requests += 1;
                }
            }
            report.over_admitted_requests =
                report.admitted_requests as i64 - report.oracle_admitted_requests as i64;
        }
        report
    }
}

fn apply(node: &mut SimNode, record: &WriteRecord) -> Result<(), EngineError> {
    node.engine.restore_key(&record.key, record.state.clone())?;
    node.applied.insert(record.id);
    Ok(())
}

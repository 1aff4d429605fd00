//! Canned fault scenarios and the scenario file format.
//!
//! ```yaml
//! config:
//!   shards:
//!     - {leader: 0, replicas: [1, 2]}
//!   failover_timeout: 5
//! scenario:
//!   kind: leader_crash
//!   writes: 10
//!   unreplicated: 3
//! ```
//!
//! Other kinds are `split_brain`, `drift` and `custom` (explicit `ops` and
//! `faults` lists with absolute times).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use limitd_core::RuleParams;

use crate::config::ClusterConfig;
use crate::sim::{CheckRecord, DriftReport, Fault, Group, Op, SimError, SimEvent, Simulator};

/// Minority and majority client groups used by the canned scenarios.
pub const MAJORITY: Group = 0;
pub const MINORITY: Group = 1;

/// Everything a scenario run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub report: DriftReport,
    pub events: Vec<SimEvent>,
    pub checks: Vec<CheckRecord>,
}

impl ScenarioResult {
    fn collect(sim: &Simulator) -> Self {
        Self {
            report: sim.report(),
            events: sim.events().to_vec(),
            checks: sim.checks().to_vec(),
        }
    }

    pub fn acked_in(&self, group: Group) -> u64 {
        self.report.acked_by_group.get(&group).copied().unwrap_or(0)
    }

    pub fn attempted_in(&self, group: Group) -> u64 {
        self.report.attempted_by_group.get(&group).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
}

/// Leader acknowledges `writes` writes to one key; the last `unreplicated`
/// are still in flight when it crashes.
///
/// Earlier writes are spaced wider than the maximum replication lag, so they
/// reach every replica; the tail is issued and the crash happens within half
/// the minimum lag, before any of it can be delivered.
pub fn leader_crash(config: &ClusterConfig, writes: u64, unreplicated: u64) -> Result<ScenarioResult, ScenarioError> {
    if unreplicated > writes {
        return Err(ScenarioError::Invalid("unreplicated writes exceed acknowledged writes".into()));
    }
    let key = "crash:{counter}".to_string();
    let mut sim = Simulator::new(config.clone())?;
    let lag = config.replication_lag;
    let spacing = lag.max + 0.5;
    let mut t = 1.0;
    for _ in 0..writes - unreplicated {
        sim.schedule_op(t, MAJORITY, Op::Write { key: key.clone() })?;
        t += spacing;
    }
    let burst = lag.min / 2.0;
    for k in 0..unreplicated {
        let at = t + burst * (k + 1) as f64 / (unreplicated + 1) as f64;
        sim.schedule_op(at, MAJORITY, Op::Write { key: key.clone() })?;
    }
    sim.schedule_fault(t + burst, Fault::CrashLeader { key })?;
    sim.run()?;
    Ok(ScenarioResult::collect(&sim))
}

/// Partition and write schedule of a split brain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBrainSpec {
    /// Writes issued and fully replicated before the partition.
    #[serde(default)]
    pub warmup_writes: u64,
    pub partition_at: f64,
    pub heal_at: f64,
    /// Write times of the client stuck with the old leader.
    pub minority_writes: Vec<f64>,
    /// Write times of the client on the majority side.
    pub majority_writes: Vec<f64>,
}

impl SplitBrainSpec {
    /// `minority` and `majority` writes spread evenly over the partition.
    pub fn even(partition_at: f64, heal_at: f64, minority: usize, majority: usize) -> Self {
        let spread = |n: usize| {
            (0..n)
                .map(|i| partition_at + (heal_at - partition_at) * (i + 1) as f64 / (n + 1) as f64)
                .collect()
        };
        Self {
            warmup_writes: 0,
            partition_at,
            heal_at,
            minority_writes: spread(minority),
            majority_writes: spread(majority),
        }
    }

    /// A random schedule whose partition outlasts the failover timeout.
    pub fn random<R: Rng>(rng: &mut R, failover_timeout: f64) -> Self {
        let partition_at = rng.random_range(10.0..20.0);
        let heal_at = partition_at + failover_timeout + rng.random_range(0.5..20.0);
        let times = |rng: &mut R| {
            let n = rng.random_range(0..=12);
            let mut v: Vec<f64> = (0..n)
                .map(|_| rng.random_range(partition_at + 1e-3..heal_at - 1e-3))
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let minority = times(rng);
        let majority = times(rng);
        Self {
            warmup_writes: rng.random_range(0..=5),
            partition_at,
            heal_at,
            minority_writes: minority,
            majority_writes: majority,
        }
    }
}

/// Isolates the leader of one key's shard together with the minority client,
/// then heals.
pub fn split_brain(config: &ClusterConfig, spec: &SplitBrainSpec) -> Result<ScenarioResult, ScenarioError> {
    if !(spec.heal_at > spec.partition_at) {
        return Err(ScenarioError::Invalid("heal_at must follow partition_at".into()));
    }
    let inside = |t: &f64| *t > spec.partition_at && *t < spec.heal_at;
    if !spec.minority_writes.iter().chain(&spec.majority_writes).all(inside) {
        return Err(ScenarioError::Invalid("writes must fall strictly inside the partition".into()));
    }
    let warmup_spacing = config.replication_lag.max + 0.5;
    if spec.warmup_writes as f64 * warmup_spacing >= spec.partition_at {
        return Err(ScenarioError::Invalid("warmup writes do not fit before the partition".into()));
    }

    let key = "split:{counter}".to_string();
    let mut sim = Simulator::new(config.clone())?;
    for i in 0..spec.warmup_writes {
        sim.schedule_op(i as f64 * warmup_spacing, MAJORITY, Op::Write { key: key.clone() })?;
    }
    sim.schedule_fault(spec.partition_at, Fault::IsolateLeader { key: key.clone() })?;
    for &t in &spec.minority_writes {
        sim.schedule_op(t, MINORITY, Op::Write { key: key.clone() })?;
    }
    for &t in &spec.majority_writes {
        sim.schedule_op(t, MAJORITY, Op::Write { key: key.clone() })?;
    }
    sim.schedule_fault(spec.heal_at, Fault::Heal)?;
    sim.run()?;
    Ok(ScenarioResult::collect(&sim))
}

/// Rate limit traffic under faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub window_size: f64,
    pub max_requests: u64,
    pub users: u32,
    pub requests: u32,
    /// Checks arrive uniformly at random in `[0, duration)`.
    pub duration: f64,
    /// Crash the leader serving user 0 at this time.
    #[serde(default)]
    pub crash_at: Option<f64>,
    /// Isolate the leader serving user 0, with a minority of the clients, over this interval.
    #[serde(default)]
    pub partition: Option<(f64, f64)>,
    /// Seed of the trace generator.
    #[serde(default)]
    pub trace_seed: u64,
}

impl DriftSpec {
    pub fn params(&self) -> RuleParams {
        RuleParams::rolling_window(self.window_size, self.max_requests)
    }

    /// User key `i`. The braces keep all keys of a user on one slot.
    pub fn user_key(i: u32) -> String {
        format!("{{user{i}}}")
    }
}

/// Runs `spec`'s generated trace through the cluster and compares the
/// admissions with a single-node oracle.
pub fn drift(config: &ClusterConfig, spec: &DriftSpec) -> Result<ScenarioResult, ScenarioError> {
    if spec.users == 0 || !(spec.duration > 0.0) {
        return Err(ScenarioError::Invalid("drift needs users and a positive duration".into()));
    }
    let mut sim = Simulator::new(config.clone())?.with_limit(spec.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.trace_seed);
    let partition = spec.partition;
    for _ in 0..spec.requests {
        let at = rng.random_range(0.0..spec.duration);
        let user = rng.random_range(0..spec.users);
        // During a partition, a third of the clients are stranded with the old leader.
        let group = match partition {
            Some((from, to)) if at > from && at < to && rng.random_bool(1.0 / 3.0) => MINORITY,
            _ => MAJORITY,
        };
        sim.schedule_op(at, group, Op::Check { key: DriftSpec::user_key(user) })?;
    }
    if let Some(at) = spec.crash_at {
        sim.schedule_fault(at, Fault::CrashLeader { key: DriftSpec::user_key(0) })?;
    }
    if let Some((from, to)) = partition {
        sim.schedule_fault(from, Fault::IsolateLeader { key: DriftSpec::user_key(0) })?;
        sim.schedule_fault(to, Fault::Heal)?;
    }
    sim.run()?;
    Ok(ScenarioResult::collect(&sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedOp {
    pub at: f64,
    #[serde(default)]
    pub group: Group,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedFault {
    pub at: f64,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSpec {
    LeaderCrash {
        writes: u64,
        unreplicated: u64,
    },
    SplitBrain(SplitBrainSpec),
    Drift(DriftSpec),
    Custom {
        #[serde(default)]
        limit: Option<RuleParams>,
        #[serde(default)]
        ops: Vec<TimedOp>,
        #[serde(default)]
        faults: Vec<TimedFault>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub config: ClusterConfig,
    pub scenario: ScenarioSpec,
}

impl ScenarioFile {
    pub fn parse(source: &str) -> Result<Self, ScenarioError> {
        serde_yaml::from_str(source).map_err(|e| ScenarioError::Parse {
            line: e.location().map(|l| l.line()),
            message: e.to_string(),
        })
    }

    /// Runs the scenario; `seed` overrides the configured seed.
    pub fn run(&self, seed: Option<u64>) -> Result<ScenarioResult, ScenarioError> {
        let mut config = self.config.clone();
        if let Some(seed) = seed {
            config.rng_seed = seed;
        }
        match &self.scenario {
            ScenarioSpec::LeaderCrash { writes, unreplicated } => leader_crash(&config, *writes, *unreplicated),
            ScenarioSpec::SplitBrain(spec) => split_brain(&config, spec),
            ScenarioSpec::Drift(spec) => drift(&config, spec),
            ScenarioSpec::Custom { limit, ops, faults } => {
                let mut sim = Simulator::new(config)?;
                if let Some(limit) = limit {
                    sim = sim.with_limit(*limit)?;
                }
                for f in faults {
                    sim.schedule_fault(f.at, f.fault.clone())?;
                }
                for o in ops {
                    sim.schedule_op(o.at, o.group, o.op.clone())?;
                }
                sim.run()?;
                Ok(ScenarioResult::collect(&sim))
            }
        }
    }
}

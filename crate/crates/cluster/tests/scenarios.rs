use limitd_cluster::scenario::{MAJORITY, MINORITY};
use limitd_cluster::sim::EventKind;
use limitd_cluster::{
    drift, leader_crash, slot_for_key, split_brain, ClusterConfig, ConsistencyMode, DriftSpec, Fault, Op,
    ReplicationMode, RouteError, ScenarioFile, Simulator, SplitBrainSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ap() -> ClusterConfig {
    ClusterConfig::uniform(1, 2).with_seed(7)
}

fn cp() -> ClusterConfig {
    ap().with_consistency(ConsistencyMode::Cp)
}

#[test]
fn slot_load_is_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut load = vec![0u32; 16384];
    let keys = 100_000;
    for _ in 0..keys {
        let key: [u8; 12] = rng.random();
        load[slot_for_key(&key, 16384) as usize] += 1;
    }
    let mean = keys as f64 / 16384.0;
    let max = *load.iter().max().unwrap() as f64;
    assert!(max <= 3.0 * mean, "max slot load {max}, mean {mean}");
}

#[test]
fn routing_follows_promotion() {
    let mut sim = Simulator::new(ap()).unwrap();
    assert_eq!(sim.route(b"k", 0), Ok(0));
    sim.schedule_fault(1.0, Fault::Crash { node: 0 }).unwrap();
    sim.run_until(1.0).unwrap();
    assert_eq!(sim.route(b"k", 0), Err(RouteError::NoLeader));
    sim.run().unwrap();
    let leader = sim.route(b"k", 0).unwrap();
    assert!(leader == 1 || leader == 2);
    assert_eq!(sim.events().iter().filter(|e| e.kind == EventKind::Promote).count(), 1);
}

#[test]
fn cp_minority_client_is_unreachable() {
    let mut sim = Simulator::new(cp()).unwrap();
    sim.schedule_fault(1.0, Fault::Partition { minority: vec![0] }).unwrap();
    sim.run_until(2.0).unwrap();
    assert_eq!(sim.route(b"k", MINORITY), Err(RouteError::NoQuorum));
    assert_eq!(sim.route(b"k", MAJORITY), Err(RouteError::NoLeader));
    sim.run().unwrap();
    assert!(sim.route(b"k", MAJORITY).is_ok());
}

#[test]
fn shards_route_by_slot() {
    let sim = Simulator::new(ClusterConfig::uniform(3, 1)).unwrap();
    let mut leaders = std::collections::BTreeSet::new();
    for i in 0..200 {
        leaders.insert(sim.route(format!("key{i}").as_bytes(), 0).unwrap());
    }
    assert_eq!(leaders.into_iter().collect::<Vec<_>>(), vec![0, 2, 4]);
}

#[test]
fn leader_crash_loses_the_unreplicated_suffix() {
    let r = leader_crash(&ap(), 10, 3).unwrap();
    assert_eq!(r.report.acknowledged_writes, 10);
    assert_eq!(r.report.lost_writes, 3);
    assert_eq!(r.report.surviving_writes, 7);
    assert_eq!(r.report.promotions, 1);

    assert_eq!(leader_crash(&ap(), 10, 0).unwrap().report.lost_writes, 0);
    let sync = ap().with_replication(ReplicationMode::Sync);
    for w in [1, 5, 10, 40] {
        assert_eq!(leader_crash(&sync, w, w.min(3)).unwrap().report.lost_writes, 0);
    }
    assert!(leader_crash(&ap(), 2, 3).is_err());
}

#[test]
fn leader_crash_is_exact_for_every_seed_and_split() {
    for seed in 0..30 {
        for (w, r) in [(1, 1), (4, 0), (10, 3), (25, 25), (25, 7)] {
            let report = leader_crash(&ap().with_seed(seed), w, r).unwrap().report;
            assert_eq!(report.lost_writes, r, "seed {seed} w {w} r {r}");
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let a = leader_crash(&ap(), 10, 3).unwrap();
    let b = leader_crash(&ap(), 10, 3).unwrap();
    assert_eq!(a, b);
    let spec = SplitBrainSpec::even(10.0, 30.0, 4, 4);
    assert_eq!(split_brain(&ap(), &spec).unwrap(), split_brain(&ap(), &spec).unwrap());
}

#[test]
fn ap_split_brain_loses_minority_writes() {
    let r = split_brain(&ap(), &SplitBrainSpec::even(10.0, 30.0, 7, 5)).unwrap();
    assert_eq!(r.acked_in(MINORITY), 7);
    assert_eq!(r.report.lost_writes, 7);
    assert_eq!(r.report.rejected_during_partition, 0);
    assert_eq!(r.report.surviving_writes, 5);
    assert!(r.events.iter().any(|e| e.kind == EventKind::Demote));
}

#[test]
fn short_partition_loses_nothing() {
    // Heals before the 5 s failover timeout.
    let mut spec = SplitBrainSpec::even(10.0, 13.0, 7, 3);
    spec.warmup_writes = 3;
    let r = split_brain(&ap(), &spec).unwrap();
    assert_eq!(r.report.lost_writes, 0);
    assert_eq!(r.report.promotions, 0);
    assert_eq!(r.report.acknowledged_writes, 13);
}

#[test]
fn cp_split_brain_refuses_minority_writes() {
    let r = split_brain(&cp(), &SplitBrainSpec::even(10.0, 30.0, 7, 5)).unwrap();
    assert_eq!(r.report.lost_writes, 0);
    assert_eq!(r.report.rejected_during_partition, 7);
    assert_eq!(r.acked_in(MAJORITY), 5);
}

#[test]
fn cap_duality_over_random_schedules() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..50 {
        let spec = SplitBrainSpec::random(&mut rng, 5.0);
        let minority = spec.minority_writes.len() as u64;
        let a = split_brain(&ap().with_seed(i), &spec).unwrap();
        assert_eq!(a.report.rejected_during_partition, 0, "{spec:?}");
        assert_eq!(a.report.lost_writes, a.acked_in(MINORITY), "{spec:?}");
        assert_eq!(a.acked_in(MINORITY), minority);
        let c = split_brain(&cp().with_seed(i), &spec).unwrap();
        assert_eq!(c.report.lost_writes, 0, "{spec:?}");
        assert_eq!(c.report.rejected_during_partition, minority, "{spec:?}");
        assert_eq!(c.attempted_in(MINORITY), minority);
    }
}

#[test]
fn replicas_converge_after_faults_resolve() {
    let mut sim = Simulator::new(ClusterConfig::uniform(2, 2).with_seed(3)).unwrap();
    for i in 0..40 {
        sim.schedule_op(i as f64 * 0.3, 0, Op::Write { key: format!("k{}", i % 5) }).unwrap();
    }
    sim.schedule_fault(4.0, Fault::Partition { minority: vec![0, 4] }).unwrap();
    sim.schedule_fault(6.0, Fault::Crash { node: 1 }).unwrap();
    sim.schedule_fault(15.0, Fault::Heal).unwrap();
    sim.schedule_fault(16.0, Fault::Recover { node: 1 }).unwrap();
    sim.run().unwrap();
    assert_eq!(sim.buffered(), 0);
    assert!(sim.replicas_consistent());
    let report = sim.report();
    assert_eq!(report.surviving_writes + report.lost_writes, report.acknowledged_writes);
}

fn drift_spec(seed: u64) -> DriftSpec {
    DriftSpec {
        window_size: 10.0,
        max_requests: 5,
        users: 3,
        requests: 600,
        duration: 60.0,
        crash_at: None,
        partition: None,
        trace_seed: seed,
    }
}

#[test]
fn drift_without_faults_matches_the_oracle() {
    for seed in 0..10 {
        let r = drift(&ap().with_seed(seed), &drift_spec(seed)).unwrap();
        assert_eq!(r.report.over_admitted_requests, 0);
        assert_eq!(r.report.lost_writes, 0);
        assert!(r.report.admitted_requests > 0);
    }
}

#[test]
fn cp_partition_trades_rejections_for_exactness() {
    let mut spec = drift_spec(4);
    spec.partition = Some((20.0, 40.0));
    let r = drift(&cp(), &spec).unwrap();
    assert_eq!(r.report.over_admitted_requests, 0);
    assert_eq!(r.report.lost_writes, 0);
    assert!(r.report.rejected_during_partition > 0);
}

#[test]
fn leader_crash_drift_is_bounded_by_lost_entries() {
    let mut losses = 0;
    for seed in 0..40 {
        let mut spec = drift_spec(seed);
        spec.users = 1;
        spec.max_requests = 50;
        spec.requests = 3000;
        spec.crash_at = Some(30.2 + 0.6 * seed as f64 / 40.0);
        let r = drift(&ap().with_seed(seed), &spec).unwrap().report;
        losses += u64::from(r.lost_writes > 0);
        assert!(r.over_admitted_requests >= 0, "seed {seed}: {r:?}");
        assert!(r.over_admitted_requests <= r.lost_writes as i64, "seed {seed}: {r:?}");
    }
    assert!(losses > 30, "only {losses} runs lost entries");
}

#[test]
fn scenario_file_round_trip() {
    let source = "
config:
  shards:
    - {leader: 0, replicas: [1, 2]}
  rng_seed: 5
scenario:
  kind: leader_crash
  writes: 10
  unreplicated: 3
";
    let file = ScenarioFile::parse(source).unwrap();
    let a = file.run(Some(7)).unwrap();
    assert_eq!(a.report.lost_writes, 3);
    assert_eq!(a, file.run(Some(7)).unwrap());

    let custom = "
config:
  shards: [{leader: 0, replicas: [1]}]
scenario:
  kind: custom
  ops:
    - {at: 1, kind: write, key: a}
    - {at: 2, kind: read, key: a}
  faults:
    - {at: 1.1, kind: crash, node: 0}
";
    let r = ScenarioFile::parse(custom).unwrap().run(None).unwrap();
    assert_eq!(r.report.lost_writes, 1);
    assert!(matches!(
        ScenarioFile::parse("config: {shards: []}\nscenario: {kind: nope}"),
        Err(limitd_cluster::scenario::ScenarioError::Parse { .. })
    ));
}

//! Lost updates: `actors` threads each increment one shared counter
//! `iterations` times, either as a client-side read, yield, write cycle or
//! through the engine's atomic increment script.

use std::str::FromStr;
use std::sync::{Arc, Barrier};

use limitd_core::atomic::COUNTER_INCR_SCRIPT;
use limitd_core::engine::{Engine, EngineError, ScriptHash};
use limitd_core::ManualClock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::report::{ExperimentReport, Provenance, ResultRow};

const COUNTER_KEY: &[u8] = b"race:counter";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaceMode {
    Atomic,
    NonAtomic,
}

impl RaceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RaceMode::Atomic => "atomic",
            RaceMode::NonAtomic => "non_atomic",
        }
    }
}

impl FromStr for RaceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "atomic" => Ok(RaceMode::Atomic),
            "non_atomic" => Ok(RaceMode::NonAtomic),
            other => Err(format!("unknown race mode {other:?}, expected atomic or non_atomic")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RaceError {
    #[error("need at least one actor and one iteration")]
    Empty,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaceOutcome {
    pub final_count: u64,
    pub expected: u64,
    pub lost: u64,
}

fn increment(engine: &Engine, mode: RaceMode, hash: &ScriptHash, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    match mode {
        RaceMode::Atomic => {
            engine.eval_by_hash(hash, &[COUNTER_KEY.to_vec()], &[b"1".to_vec()])?;
        }
        RaceMode::NonAtomic => {
            let value = engine.get_number(COUNTER_KEY)?.unwrap_or(0.0);
            // Hand the CPU over between read and write, a seeded number of times.
            for _ in 0..1 + rng.random_range(0..3) {
                std::thread::yield_now();
            }
            engine.set_number(COUNTER_KEY, value + 1.0)?;
        }
    }
    Ok(())
}

/// One trial: all actors start together on a fresh engine.
pub fn race_trial(actors: u32, iterations: u32, mode: RaceMode, seed: u64) -> Result<RaceOutcome, RaceError> {
    if actors == 0 || iterations == 0 {
        return Err(RaceError::Empty);
    }
    let engine = Arc::new(Engine::new(Arc::new(ManualClock::new(0.0))));
    let hash = engine.load_script(COUNTER_INCR_SCRIPT)?;
    let barrier = Barrier::new(actors as usize);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..actors)
            .map(|actor| {
                let (engine, hash, barrier) = (&engine, &hash, &barrier);
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(actor) << 32));
                    barrier.wait();
                    (0..iterations).try_for_each(|_| increment(engine, mode, hash, &mut rng))
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("race actor panicked"))
    })?;
    let final_count = engine.get_number(COUNTER_KEY)?.unwrap_or(0.0) as u64;
    let expected = u64::from(actors) * u64::from(iterations);
    Ok(RaceOutcome {
        final_count,
        expected,
        lost: expected.saturating_sub(final_count),
    })
}

/// Runs `trials` seeded trials of each mode.
pub fn run_race_demo(
    actors: u32,
    iterations: u32,
    modes: &[RaceMode],
    trials: u32,
    seed: u64,
) -> Result<ExperimentReport, RaceError> {
    let mut report = ExperimentReport::new("race")
        .parameter("actors", actors)
        .parameter("iterations", iterations)
        .parameter("trials", trials)
        .parameter("seed", seed);
    for &mode in modes {
        let mut outcomes = Vec::with_capacity(trials as usize);
        for trial in 0..trials {
            outcomes.push(race_trial(actors, iterations, mode, seed.wrapping_add(u64::from(trial)))?);
        }
        let expected = u64::from(actors) * u64::from(iterations);
        let with_loss = outcomes.iter().filter(|o| o.lost > 0).count();
        let finals = outcomes.iter().map(|o| o.final_count);
        report.rows.push(
            ResultRow::new(mode.as_str(), Provenance::Measured)
                .metric("expected", expected)
                .metric("min_final", finals.clone().min().unwrap_or(0))
                .metric("max_final", finals.max().unwrap_or(0))
                .metric("trials_with_loss", with_loss)
                .metric("total_lost", outcomes.iter().map(|o| o.lost).sum::<u64>()),
        );
        let overcounted = outcomes.iter().any(|o| o.final_count > expected);
        report.require(!overcounted, format!("{} never counts past {expected}", mode.as_str()));
        if mode == RaceMode::Atomic || actors == 1 {
            report.require(with_loss == 0, format!("{} loses no updates", mode.as_str()));
        }
    }
    Ok(report)
}

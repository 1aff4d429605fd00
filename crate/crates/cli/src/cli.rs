use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use limitd_cluster::scenario::ScenarioError;
use limitd_cluster::ScenarioFile;
use limitd_core::rules::DEFAULT_CACHE_TTL;
use limitd_core::SystemClock;
use limitd_gateway::{build_gateway, FailPolicy, GatewayOptions, MiddlewareConfig};
use thiserror::Error;

use crate::burst::{run_boundary_burst, BurstError, BurstPattern};
use crate::memory::{memory_report, DEFAULT_SAMPLE};
use crate::race::{run_race_demo, RaceError, RaceMode};
use crate::report::{ExperimentReport, OutputFormat, Provenance, ResultRow, Verdict};

/// Exit status of a run whose verdict passed.
pub const EXIT_PASS: i32 = 0;
/// Exit status of a run whose verdict failed.
pub const EXIT_FAIL: i32 = 1;
/// Exit status of a usage, input or I/O error.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "limitd", version, about = "Rate limiting service, cluster simulator and experiments")]
pub struct Cli {
    /// Seed of every randomized run.
    #[arg(long, global = true, env = "LIMITD_SEED")]
    pub seed: Option<u64>,
    /// Report format.
    #[arg(long, global = true, env = "LIMITD_OUTPUT", default_value = "text")]
    pub output: OutputFormat,
    /// Print nothing; the exit status carries the verdict.
    #[arg(long, global = true, env = "LIMITD_QUIET")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve(ServeArgs),
    /// Run a cluster scenario file.
    Simulate(SimulateArgs),
    /// Fixed vs rolling window under a boundary burst.
    BenchBurst(BurstArgs),
    /// Per-algorithm memory model and engine accounting.
    BenchMemory(MemoryArgs),
    /// Lost updates with and without atomic scripts.
    BenchRace(RaceArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LIMITD_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Rule document loaded at startup.
    #[arg(long, env = "LIMITD_RULES")]
    pub rules: Option<PathBuf>,
    /// Rule store file; rules are kept in memory when absent.
    #[arg(long, env = "LIMITD_STORE")]
    pub store: Option<PathBuf>,
    /// fail_open or fail_closed.
    #[arg(long, env = "LIMITD_FAIL_POLICY", default_value = "fail_open")]
    pub fail_policy: FailPolicy,
    #[arg(long, env = "LIMITD_CACHE_TTL_SECONDS", default_value_t = DEFAULT_CACHE_TTL)]
    pub cache_ttl_seconds: f64,
    /// Rule domain of requests passing through the middleware.
    #[arg(long, env = "LIMITD_MIDDLEWARE_DOMAIN", default_value = "app")]
    pub middleware_domain: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    /// Also write the full run (report, events, checks) as JSON.
    #[arg(long, env = "LIMITD_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatternKind {
    Straddle,
    Uniform,
    Inside,
}

#[derive(Debug, Args)]
pub struct BurstArgs {
    #[arg(long, default_value_t = 60.0)]
    pub window: f64,
    #[arg(long, default_value_t = 100)]
    pub max: u64,
    #[arg(long, value_enum, default_value = "straddle")]
    pub pattern: PatternKind,
    /// Straddle: requests on each side of the boundary [default: max].
    #[arg(long)]
    pub per_side: Option<u64>,
    /// Straddle: distance of each side from the boundary.
    #[arg(long, default_value_t = 0.1)]
    pub offset: f64,
    /// Uniform: seconds between requests.
    #[arg(long, default_value_t = 1.0)]
    pub interval: f64,
    /// Uniform: trace length [default: 5 windows].
    #[arg(long)]
    pub duration: Option<f64>,
    /// Inside: burst size [default: 2 * max].
    #[arg(long)]
    pub count: Option<u64>,
    /// Inside: burst time [default: half a window].
    #[arg(long)]
    pub at: Option<f64>,
}

impl BurstArgs {
    pub fn pattern(&self) -> BurstPattern {
        match self.pattern {
            PatternKind::Straddle => BurstPattern::Straddle {
                per_side: self.per_side.unwrap_or(self.max),
                offset: self.offset,
            },
            PatternKind::Uniform => BurstPattern::Uniform {
                interval: self.interval,
                duration: self.duration.unwrap_or(5.0 * self.window),
            },
            PatternKind::Inside => BurstPattern::Inside {
                count: self.count.unwrap_or(2 * self.max),
                at: self.at.unwrap_or(self.window / 2.0),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pub users: u64,
    /// Rolling window request limit L.
    #[arg(long, default_value_t = 100)]
    pub limit: u64,
    /// Concurrent request limit C.
    #[arg(long, default_value_t = 50)]
    pub concurrent: u64,
    /// Most users materialized in the engine.
    #[arg(long, default_value_t = DEFAULT_SAMPLE)]
    pub sample: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RaceModeArg {
    Atomic,
    NonAtomic,
    Both,
}

#[derive(Debug, Args)]
pub struct RaceArgs {
    #[arg(long, default_value_t = 100)]
    pub actors: u32,
    #[arg(long, default_value_t = 100)]
    pub iterations: u32,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: RaceModeArg,
    #[arg(long, default_value_t = 10)]
    pub trials: u32,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Burst(#[from] BurstError),
    #[error(transparent)]
    Race(#[from] RaceError),
    #[error("{0}")]
    Memory(String),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("gateway: {0}")]
    Gateway(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Cli {
    /// Runs the command, writing its report to `out`.
    pub fn run(&self, out: &mut dyn Write) -> Result<Verdict, CliError> {
        let report = match &self.command {
            Command::Serve(args) => return self.serve(args, out),
            Command::Simulate(args) => self.simulate(args)?,
            Command::BenchBurst(args) => run_boundary_burst(args.window, args.max, args.pattern())?,
            Command::BenchMemory(args) => memory_report(args.users, args.limit, args.concurrent, args.sample)
                .map_err(|e| CliError::Memory(e.to_string()))?,
            Command::BenchRace(args) => {
                let modes: &[RaceMode] = match args.mode {
                    RaceModeArg::Atomic => &[RaceMode::Atomic],
                    RaceModeArg::NonAtomic => &[RaceMode::NonAtomic],
                    RaceModeArg::Both => &[RaceMode::Atomic, RaceMode::NonAtomic],
                };
                run_race_demo(args.actors, args.iterations, modes, args.trials, self.seed.unwrap_or(0))?
            }
        };
        if !self.quiet {
            out.write_all(report.render(self.output).as_bytes())?;
        }
        Ok(report.verdict)
    }

    fn simulate(&self, args: &SimulateArgs) -> Result<ExperimentReport, CliError> {
        let input = |message: String| CliError::Input {
            path: args.scenario.clone(),
            message,
        };
        let source = std::fs::read_to_string(&args.scenario).map_err(|e| input(e.to_string()))?;
        let file = ScenarioFile::parse(&source).map_err(|e| input(e.to_string()))?;
        let result = file.run(self.seed)?;
        if let Some(path) = &args.report {
            let json = serde_json::to_string_pretty(&result).map_err(std::io::Error::other)?;
            std::fs::write(path, json + "\n")?;
        }

        let r = &result.report;
        let mut report = ExperimentReport::new("simulate")
            .parameter("scenario", args.scenario.display())
            .parameter("seed", self.seed.unwrap_or(file.config.rng_seed));
        report.rows.push(
            ResultRow::new("cluster", Provenance::Measured)
                .metric("acknowledged_writes", r.acknowledged_writes)
                .metric("surviving_writes", r.surviving_writes)
                .metric("lost_writes", r.lost_writes)
                .metric("rejected_during_partition", r.rejected_during_partition)
                .metric("promotions", r.promotions)
                .metric("admitted_requests", r.admitted_requests)
                .metric("oracle_admitted_requests", r.oracle_admitted_requests)
                .metric("over_admitted_requests", r.over_admitted_requests)
                .metric("events", result.events.len()),
        );
        report.require(
            r.surviving_writes + r.lost_writes == r.acknowledged_writes,
            "every acknowledged write either survives or is lost",
        );
        Ok(report)
    }

    fn serve(&self, args: &ServeArgs, out: &mut dyn Write) -> Result<Verdict, CliError> {
        let options = GatewayOptions {
            rules: args.rules.clone(),
            store: args.store.clone(),
            fail_policy: args.fail_policy,
            cache_ttl: args.cache_ttl_seconds,
            middleware: MiddlewareConfig {
                domain: args.middleware_domain.clone(),
            },
        };
        let gateway = build_gateway(&options, Arc::new(SystemClock::new())).map_err(|e| CliError::Gateway(e.to_string()))?;
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(async {
            let listener = tokio::net::TcpListener::bind(args.listen).await?;
            if !self.quiet {
                writeln!(out, "listening on {}", listener.local_addr()?)?;
                out.flush()?;
            }
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            limitd_gateway::serve(listener, Arc::new(gateway), options.middleware.clone(), shutdown).await
        })?;
        Ok(Verdict::Pass)
    }
}

/// Process exit status of a finished run.
pub fn exit_code(result: &Result<Verdict, CliError>) -> i32 {
    match result {
        Ok(Verdict::Pass) => EXIT_PASS,
        Ok(Verdict::Fail) => EXIT_FAIL,
        Err(_) => EXIT_USAGE,
    }
}

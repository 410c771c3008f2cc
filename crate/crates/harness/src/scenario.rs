//! Declarative scenarios: a registry, a set of workers, and one client
//! job, wired into a fresh simulation and run to completion.
//!
//! Hosts are named `registry` (port 7000), `worker0..workerN` (port 9000
//! each), and `client`. Scenarios are plain structs and also parse from
//! TOML, so the same format drives tests and the command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use futures::future::FutureExt;
use futures::pin_mut;
use serde::Deserialize;
use thiserror::Error;

use taskfarm_core::client::{compute, ComputeConfig, ComputeError};
use taskfarm_core::processors::{Processor, ProcessorTable};
use taskfarm_core::protocol::Endpoint;
use taskfarm_core::registry::{start_registry, RegistryConfig};
use taskfarm_core::runtime::Env;
use taskfarm_core::skeletons::{self, eval_sequential, JobSpec, ParseError, StageTable};
use taskfarm_core::worker::{worker_main, WorkerConfig};

use crate::sim::{run_until, SimCore, DEFAULT_LATENCY_MS, DEFAULT_TIME_LIMIT_MS};
use crate::trace::Trace;

pub const REGISTRY_HOST: &str = "registry";
pub const REGISTRY_PORT: u16 = 7000;
pub const WORKER_PORT: u16 = 9000;
pub const CLIENT_HOST: &str = "client";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_latency")]
    pub latency_ms: u64,
    #[serde(default = "default_time_limit")]
    pub time_limit_ms: u64,
    pub job: JobSection,
    pub input: InputSection,
    #[serde(default)]
    pub workers: Vec<WorkerSection>,
    #[serde(default)]
    pub client: ClientSection,
}

fn default_latency() -> u64 {
    DEFAULT_LATENCY_MS
}

fn default_time_limit() -> u64 {
    DEFAULT_TIME_LIMIT_MS
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct JobSection {
    /// Skeleton syntax, e.g. `farm(pipe(seq(reverse), seq(append)))`.
    pub skeleton: String,
    /// Per-processor configuration, UTF-8 strings.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

/// Either an explicit list of task payloads or `count` copies of `payload`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InputSection {
    #[serde(default)]
    pub lines: Vec<String>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub payload: Option<String>,
}

impl InputSection {
    pub fn payloads(&self) -> Result<Vec<Vec<u8>>, ScenarioError> {
        match (&self.lines[..], self.count) {
            ([], Some(n)) => {
                let payload = self.payload.clone().unwrap_or_default().into_bytes();
                Ok(vec![payload; n])
            }
            (lines, None) if !lines.is_empty() => {
                Ok(lines.iter().map(|l| l.clone().into_bytes()).collect())
            }
            _ => Err(ScenarioError::Input(
                "input needs either lines or count (not both, not neither)".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct WorkerSection {
    pub processors: Vec<String>,
    /// Virtual milliseconds each stage run costs on this worker.
    #[serde(default)]
    pub service_time_ms: u64,
    /// When the worker process starts, in virtual milliseconds.
    #[serde(default)]
    pub arrival_ms: u64,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(
    deny_unknown_fields,
    rename_all = "kebab-case",
    rename_all_fields = "kebab-case",
    tag = "kind"
)]
pub enum FaultSpec {
    /// Fail-stop crash the moment one more assignment arrives after
    /// `completed` finished tasks, so a task is exactly in flight.
    CrashAfterTasks { completed: u32 },
    /// Fail-stop crash at an absolute virtual time.
    CrashAtTime { at_ms: u64 },
    /// Deliver the first assignment, then silently drop all traffic; the
    /// host stays up but unreachable, so only timeouts can detect it.
    DropAfterAssign,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ClientSection {
    pub ping_interval_ms: Option<u64>,
    pub ping_timeout_ms: Option<u64>,
    pub task_timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub min_services: Option<usize>,
    pub startup_window_ms: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid skeleton: {0}")]
    Skeleton(#[from] ParseError),
    #[error("invalid input: {0}")]
    Input(String),
}

impl Scenario {
    pub fn from_toml(src: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(src)?)
    }

    pub fn job_spec(&self) -> Result<JobSpec, ScenarioError> {
        let skeleton = skeletons::parse(&self.job.skeleton)?;
        let processor_config = self
            .job
            .config
            .iter()
            .map(|(k, v)| (k.clone(), v.clone().into_bytes()))
            .collect();
        Ok(JobSpec {
            skeleton,
            processor_config,
        })
    }

    fn compute_config(&self) -> ComputeConfig {
        let mut cfg = ComputeConfig {
            registry: Endpoint {
                host: REGISTRY_HOST.into(),
                port: REGISTRY_PORT,
            },
            ..ComputeConfig::default()
        };
        let c = &self.client;
        if let Some(v) = c.ping_interval_ms {
            cfg.ping_interval_ms = v;
        }
        if let Some(v) = c.ping_timeout_ms {
            cfg.ping_timeout_ms = v;
        }
        if let Some(v) = c.task_timeout_ms {
            cfg.task_timeout_ms = v;
        }
        if let Some(v) = c.max_retries {
            cfg.max_retries = v;
        }
        if let Some(v) = c.min_services {
            cfg.min_services = v;
        }
        if let Some(v) = c.startup_window_ms {
            cfg.startup_window_ms = v;
        }
        cfg
    }
}

pub fn worker_host(index: usize) -> String {
    format!("worker{index}")
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub result: Result<Vec<Vec<u8>>, ComputeError>,
    pub trace: Trace,
}

/// Runs the scenario on a fresh simulation. The virtual clock starts at 0;
/// the function returns once the client's computation settles.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome, ScenarioError> {
    let job = s.job_spec()?;
    let input = s.input.payloads()?;
    let cfg = s.compute_config();

    let core = SimCore::new(s.seed, s.latency_ms, s.time_limit_ms);
    for (i, w) in s.workers.iter().enumerate() {
        let host = worker_host(i);
        match &w.fault {
            Some(FaultSpec::CrashAfterTasks { completed }) => {
                core.crash_after_assigns(&host, *completed)
            }
            Some(FaultSpec::CrashAtTime { at_ms }) => core.crash_host_at(&host, *at_ms),
            Some(FaultSpec::DropAfterAssign) => core.drop_after_first_assign(&host),
            None => {}
        }
    }

    let registry_ep = Endpoint {
        host: REGISTRY_HOST.into(),
        port: REGISTRY_PORT,
    };
    let workers = s.workers.clone();
    let root_core = core.clone();
    let root_registry = registry_ep.clone();
    let result = run_until(&core, async move {
        let reg_env: Arc<dyn Env> = root_core.env(REGISTRY_HOST);
        start_registry(reg_env, &root_registry, RegistryConfig::default())
            .await
            .expect("sim registry starts");

        for (i, w) in workers.iter().enumerate() {
            let host = worker_host(i);
            let env = root_core.env_with_compute(&host, w.service_time_ms);
            let wcfg = WorkerConfig::new(
                root_registry.clone(),
                Endpoint {
                    host: host.clone(),
                    port: WORKER_PORT,
                },
                sim_table(&w.processors),
            );
            let watch = root_core.crash_watch(&host);
            let arrival = w.arrival_ms;
            let task_env = env.clone();
            env.spawn(Box::pin(async move {
                if arrival > 0 {
                    task_env.sleep_ms(arrival).await;
                }
                let work = worker_main(
                    task_env.clone() as Arc<dyn Env>,
                    wcfg,
                    futures::future::pending(),
                )
                .fuse();
                let watch = watch.fuse();
                pin_mut!(work, watch);
                futures::select_biased! {
                    _ = watch => {}
                    _ = work => {}
                }
            }));
        }

        let client_env: Arc<dyn Env> = root_core.env(CLIENT_HOST);
        compute(client_env, &job, input, cfg).await
    });
    let trace = Trace::new(core.take_trace());
    Ok(ScenarioOutcome { result, trace })
}

/// What every simulated run must produce: the job evaluated sequentially,
/// with the same stage semantics the simulated workers use.
pub fn expected_outputs(s: &Scenario) -> Result<Vec<Vec<u8>>, ScenarioError> {
    let job = s.job_spec()?;
    let mut table = StageTable::new();
    let builtin = Arc::new(ProcessorTable::builtin());
    for leaf in job.skeleton.leaves() {
        let cfg = job.processor_config.get(leaf).cloned().unwrap_or_default();
        if leaf != "delay" && builtin.supports(leaf) {
            let builtin = builtin.clone();
            let name = leaf.to_string();
            table.insert(leaf, move |input: &[u8]| {
                let mut p = builtin
                    .instantiate(&name, &cfg)
                    .expect("stage instantiates");
                p.set_data(input.to_vec());
                p.run();
                p.get_data()
            });
        } else {
            table.insert(leaf, |input: &[u8]| input.to_vec());
        }
    }
    let input = s.input.payloads()?;
    Ok(eval_sequential(&job.skeleton, &input, &table).expect("stages are all present"))
}

/// Processor table for simulated workers. Known builtins behave normally;
/// `delay` and unknown names degrade to the identity because cost is
/// modeled by the worker's virtual service time, never by real sleeping.
fn sim_table(names: &[String]) -> ProcessorTable {
    let builtin = Arc::new(ProcessorTable::builtin());
    let mut table = ProcessorTable::new();
    for name in names {
        if name != "delay" && builtin.supports(name) {
            let builtin = builtin.clone();
            let name_owned = name.clone();
            table.register(name, move |cfg: &[u8]| {
                builtin.instantiate(&name_owned, cfg)
            });
        } else {
            table.register(name, |_cfg: &[u8]| {
                Ok(Box::new(Echo::default()) as Box<dyn Processor>)
            });
        }
    }
    table
}

#[derive(Default)]
struct Echo {
    data: Vec<u8>,
}

impl Processor for Echo {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }

    fn run(&mut self) {}

    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

#[derive(Debug, Clone)]
pub struct SpeedupRow {
    pub workers: usize,
    pub makespan_ms: u64,
    pub speedup: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone)]
pub struct SpeedupReport {
    pub tasks: usize,
    pub service_time_ms: u64,
    pub rows: Vec<SpeedupRow>,
}

impl std::fmt::Display for SpeedupReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} tasks, {} ms each; ideal sequential time {} ms",
            self.tasks,
            self.service_time_ms,
            self.tasks as u64 * self.service_time_ms
        )?;
        writeln!(
            f,
            "{:>8} {:>12} {:>9} {:>11}",
            "workers", "makespan_ms", "speedup", "efficiency"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} {:>12} {:>9.2} {:>11.3}",
                r.workers, r.makespan_ms, r.speedup, r.efficiency
            )?;
        }
        Ok(())
    }
}

/// Runs the same homogeneous farm at each worker count on a zero-latency
/// network and reports scaling. Speedup is ideal sequential time over
/// measured makespan; efficiency divides that by the worker count.
pub fn speedup_report(
    seed: u64,
    tasks: usize,
    service_time_ms: u64,
    worker_counts: &[usize],
) -> SpeedupReport {
    let ideal = tasks as u64 * service_time_ms;
    let mut rows = Vec::new();
    for &w in worker_counts {
        let workers = (0..w)
            .map(|_| WorkerSection {
                processors: vec!["delay".into()],
                service_time_ms,
                arrival_ms: 0,
                fault: None,
            })
            .collect();
        let scenario = Scenario {
            seed,
            latency_ms: 0,
            time_limit_ms: DEFAULT_TIME_LIMIT_MS.max(ideal * 4),
            job: JobSection {
                skeleton: "farm(seq(delay))".into(),
                config: BTreeMap::new(),
            },
            input: InputSection {
                lines: Vec::new(),
                count: Some(tasks),
                payload: Some("x".into()),
            },
            workers,
            client: ClientSection::default(),
        };
        let outcome = run_scenario(&scenario).expect("speedup scenario is well formed");
        outcome.result.as_ref().expect("speedup scenario completes");
        let makespan = outcome.trace.makespan_ms().unwrap_or(0).max(1);
        let speedup = ideal as f64 / makespan as f64;
        rows.push(SpeedupRow {
            workers: w,
            makespan_ms: makespan,
            speedup,
            efficiency: speedup / w as f64,
        });
    }
    SpeedupReport {
        tasks,
        service_time_ms,
        rows,
    }
}

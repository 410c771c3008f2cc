//! `taskfarm`: operator front end for the task-farm runtime.
//!
//! Subcommands run the registry and worker daemons, submit a job from a
//! job file, render the mandelbrot demo, and drive the simulation
//! harness. The registry address is taken from `--registry`, then the
//! `TASKFARM_REGISTRY` environment variable, then `127.0.0.1:7000`.

use std::collections::BTreeMap;
use std::future::pending;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use taskfarm_core::client::{compute, ComputeConfig, ComputeError};
use taskfarm_core::processors::ProcessorTable;
use taskfarm_core::protocol::Endpoint;
use taskfarm_core::registry::{start_registry, RegistryConfig};
use taskfarm_core::runtime::{Env, TokioEnv};
use taskfarm_core::skeletons::{self, JobSpec, SkeletonExpr};
use taskfarm_core::worker::{worker_main, WorkerConfig};
use taskfarm_harness::scenario::{run_scenario, speedup_report, Scenario};

const REGISTRY_ENV_VAR: &str = "TASKFARM_REGISTRY";
const DEFAULT_REGISTRY: &str = "127.0.0.1:7000";

#[derive(Parser)]
#[command(
    name = "taskfarm",
    version,
    about = "Distributed task farm over a leased service registry"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the service registry daemon.
    Registry(RegistryArgs),
    /// Run a worker daemon offering built-in processors.
    Worker(WorkerArgs),
    /// Submit a job file and write its outputs.
    Run(RunArgs),
    /// Render a mandelbrot image by farming out rows as tasks.
    DemoMandelbrot(DemoArgs),
    /// Deterministic simulation harness.
    #[command(subcommand)]
    Harness(HarnessCmd),
}

#[derive(Args)]
struct RegistryArgs {
    /// Address to listen on.
    #[arg(long, default_value = DEFAULT_REGISTRY)]
    bind: Endpoint,
    /// How often expired leases are garbage collected, in milliseconds.
    #[arg(long = "sweep-interval-ms", alias = "sweep-interval")]
    sweep_interval_ms: Option<u64>,
    /// Longest lease a worker may request, in milliseconds.
    #[arg(long)]
    max_lease_ms: Option<u64>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Registry address (falls back to TASKFARM_REGISTRY, then the default).
    #[arg(long)]
    registry: Option<Endpoint>,
    /// Address to serve tasks on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: Endpoint,
    /// Address to advertise if it differs from --bind (e.g. behind NAT).
    #[arg(long)]
    advertise: Option<Endpoint>,
    /// Comma-separated subset of the built-in processor table.
    #[arg(long, value_delimiter = ',')]
    processors: Option<Vec<String>>,
    /// Lease duration requested from the registry, in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    lease_ms: u64,
    /// How long before expiry the lease is renewed, in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    renew_ms: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Job file (TOML: skeleton, config, input, output).
    job: PathBuf,
    #[arg(long)]
    registry: Option<Endpoint>,
    /// Overrides the output path from the job file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Give up if no worker is recruited within this window, milliseconds.
    #[arg(long)]
    startup_window_ms: Option<u64>,
    /// Abort a single task after this long, milliseconds; 0 disables.
    #[arg(long)]
    task_timeout_ms: Option<u64>,
    /// Reschedule a task at most this many times before failing the job.
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    /// Complex-plane window: x0 x1 y0 y1.
    #[arg(long, num_args = 4, allow_negative_numbers = true,
          value_names = ["X0", "X1", "Y0", "Y1"],
          default_values_t = [-2.0, 1.0, -1.5, 1.5])]
    region: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    maxiter: u32,
    #[arg(long, default_value = "mandelbrot.pgm")]
    output: PathBuf,
    #[arg(long)]
    registry: Option<Endpoint>,
    /// Spawn an in-process registry and this many in-process workers
    /// instead of using an external cluster.
    #[arg(long, default_value_t = 0)]
    local_workers: usize,
}

#[derive(Subcommand)]
enum HarnessCmd {
    /// Run a scenario file in the simulator.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Write the full event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Measure scaling of a homogeneous farm at several worker counts.
    Speedup {
        #[arg(long, default_value_t = 200)]
        tasks: usize,
        #[arg(long, default_value_t = 20)]
        service_time_ms: u64,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Registry(args) => cmd_registry(args).await,
        Cmd::Worker(args) => cmd_worker(args).await,
        Cmd::Run(args) => cmd_run(args).await,
        Cmd::DemoMandelbrot(args) => cmd_demo_mandelbrot(args).await,
        Cmd::Harness(cmd) => cmd_harness(cmd).await,
    }
}

fn fail(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::FAILURE
}

/// Exit codes are part of the interface: 2 means a task kept failing, 3
/// means no usable worker appeared; everything else unexpected is 1.
fn compute_exit(err: &ComputeError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        ComputeError::TaskFailed(_) => ExitCode::from(2),
        ComputeError::NoServicesAvailable => ExitCode::from(3),
        _ => ExitCode::FAILURE,
    }
}

fn resolve_registry(flag: Option<Endpoint>) -> Result<Endpoint, String> {
    if let Some(ep) = flag {
        return Ok(ep);
    }
    match std::env::var(REGISTRY_ENV_VAR) {
        Ok(raw) => raw
            .parse()
            .map_err(|e| format!("bad {REGISTRY_ENV_VAR} value: {e}")),
        Err(_) => Ok(DEFAULT_REGISTRY.parse().expect("default registry parses")),
    }
}

/// Writes via a temporary file in the same directory plus a rename, so a
/// failed run never leaves a partial output file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

async fn cmd_registry(args: RegistryArgs) -> ExitCode {
    let mut cfg = RegistryConfig::default();
    if let Some(v) = args.sweep_interval_ms {
        cfg.sweep_interval_ms = v;
    }
    if let Some(v) = args.max_lease_ms {
        cfg.max_lease_ms = v;
    }
    let env = TokioEnv::new();
    let bound = match start_registry(env, &args.bind, cfg).await {
        Ok(ep) => ep,
        Err(e) => return fail(format_args!("cannot bind {}: {e}", args.bind)),
    };
    println!("registry listening on {bound}");
    if let Err(e) = tokio::signal::ctrl_c().await {
        return fail(e);
    }
    ExitCode::SUCCESS
}

async fn cmd_worker(args: WorkerArgs) -> ExitCode {
    let registry = match resolve_registry(args.registry) {
        Ok(ep) => ep,
        Err(e) => return fail(e),
    };
    let table = match args.processors {
        None => ProcessorTable::builtin(),
        Some(names) => match ProcessorTable::builtin_subset(names.iter().map(String::as_str)) {
            Ok(t) => t,
            Err(e) => return fail(e),
        },
    };
    let offered: Vec<&str> = table.names().collect();
    println!(
        "worker starting (registry {registry}, processors {})",
        offered.join(",")
    );
    let mut cfg = WorkerConfig::new(registry, args.bind, table);
    cfg.advertise = args.advertise;
    cfg.lease_ms = args.lease_ms;
    cfg.renew_ms = args.renew_ms;
    let env = TokioEnv::new();
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match worker_main(env, cfg, shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

/// A job as submitted from the command line. Input payloads are base64,
/// one task per line, either inline or in a separate file; outputs are
/// written the same way, in input order.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct JobFile {
    skeleton: String,
    #[serde(default)]
    config: BTreeMap<String, String>,
    input: JobInput,
    #[serde(default)]
    output: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct JobInput {
    #[serde(default)]
    lines: Vec<String>,
    #[serde(default)]
    file: Option<PathBuf>,
}

impl JobFile {
    fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&raw).map_err(|e| format!("invalid job file: {e}"))
    }

    /// Tasks are base64 both inline and in the file, so payloads can hold
    /// arbitrary bytes and outputs read back the same way they went in.
    fn payloads(&self, job_dir: &Path) -> Result<Vec<Vec<u8>>, String> {
        let decode_lines = |lines: &mut dyn Iterator<Item = &str>| {
            lines
                .enumerate()
                .map(|(i, l)| {
                    B64.decode(l.trim())
                        .map_err(|e| format!("bad base64 on input line {}: {e}", i + 1))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        match (&self.input.lines[..], &self.input.file) {
            (lines, None) if !lines.is_empty() => {
                decode_lines(&mut lines.iter().map(String::as_str))
            }
            ([], Some(file)) => {
                let path = job_dir.join(file);
                let raw = std::fs::read_to_string(&path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                decode_lines(&mut raw.lines().filter(|l| !l.trim().is_empty()))
            }
            _ => Err("job input needs either lines or file (not both, not neither)".into()),
        }
    }

    fn to_spec(&self) -> Result<JobSpec, String> {
        let skeleton = skeletons::parse(&self.skeleton).map_err(|e| e.to_string())?;
        let processor_config = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), v.clone().into_bytes()))
            .collect();
        Ok(JobSpec {
            skeleton,
            processor_config,
        })
    }
}

fn render_output_lines(outputs: &[Vec<u8>]) -> String {
    let mut text = String::new();
    for out in outputs {
        text.push_str(&B64.encode(out));
        text.push('\n');
    }
    text
}

async fn cmd_run(args: RunArgs) -> ExitCode {
    let job_file = match JobFile::load(&args.job) {
        Ok(j) => j,
        Err(e) => return fail(e),
    };
    let job_dir = args.job.parent().unwrap_or(Path::new(".")).to_path_buf();
    // --output is taken as given; a relative path in the job file resolves
    // next to the job file, like input.file does.
    let out_path = match (args.output, job_file.output.clone()) {
        (Some(p), _) => p,
        (None, Some(p)) => job_dir.join(p),
        (None, None) => return fail("no output path: set output in the job file or pass --output"),
    };
    let job = match job_file.to_spec() {
        Ok(j) => j,
        Err(e) => return fail(e),
    };
    let input = match job_file.payloads(&job_dir) {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    let registry = match resolve_registry(args.registry) {
        Ok(ep) => ep,
        Err(e) => return fail(e),
    };
    let mut cfg = ComputeConfig {
        registry,
        ..ComputeConfig::default()
    };
    if let Some(v) = args.startup_window_ms {
        cfg.startup_window_ms = v;
    }
    if let Some(v) = args.task_timeout_ms {
        cfg.task_timeout_ms = v;
    }
    if let Some(v) = args.max_retries {
        cfg.max_retries = v;
    }

    let env: Arc<dyn Env> = TokioEnv::new();
    match compute(env, &job, input, cfg).await {
        Ok(outputs) => {
            if let Err(e) = write_atomic(&out_path, render_output_lines(&outputs).as_bytes()) {
                return fail(format_args!("cannot write {}: {e}", out_path.display()));
            }
            println!("wrote {} results to {}", outputs.len(), out_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => compute_exit(&e),
    }
}

async fn cmd_demo_mandelbrot(args: DemoArgs) -> ExitCode {
    if args.width == 0 || args.height == 0 {
        return fail("width and height must be positive");
    }
    let [x0, x1, y0, y1]: [f64; 4] = match args.region.as_slice().try_into() {
        Ok(r) => r,
        Err(_) => return fail("--region takes exactly four numbers: x0 x1 y0 y1"),
    };

    let env: Arc<dyn Env> = TokioEnv::new();
    let registry = if args.local_workers > 0 {
        let bound = match start_registry(
            env.clone(),
            &Endpoint::new("127.0.0.1", 0),
            RegistryConfig::default(),
        )
        .await
        {
            Ok(ep) => ep,
            Err(e) => return fail(format_args!("cannot start local registry: {e}")),
        };
        for _ in 0..args.local_workers {
            let table = ProcessorTable::builtin_subset(["mandelbrot-row"])
                .expect("mandelbrot-row is built in");
            let cfg = WorkerConfig::new(bound.clone(), Endpoint::new("127.0.0.1", 0), table);
            let worker_env = env.clone();
            env.spawn(Box::pin(async move {
                let _ = worker_main(worker_env, cfg, pending::<()>()).await;
            }));
        }
        bound
    } else {
        match resolve_registry(args.registry) {
            Ok(ep) => ep,
            Err(e) => return fail(e),
        }
    };

    // One task per row: "x0 x1 y n maxiter", answered by n big-endian
    // 32-bit iteration counts.
    let input: Vec<Vec<u8>> = (0..args.height)
        .map(|r| {
            let y = y0 + (r as f64) * (y1 - y0) / (args.height as f64);
            format!("{x0} {x1} {y} {} {}", args.width, args.maxiter).into_bytes()
        })
        .collect();
    let job = JobSpec::new(SkeletonExpr::farm(SkeletonExpr::seq("mandelbrot-row")));
    let cfg = ComputeConfig {
        registry,
        ..ComputeConfig::default()
    };

    let outputs = match compute(env, &job, input, cfg).await {
        Ok(o) => o,
        Err(e) => return compute_exit(&e),
    };

    let mut pgm = format!("P5\n{} {}\n255\n", args.width, args.height).into_bytes();
    for (r, row) in outputs.iter().enumerate() {
        if row.len() != args.width as usize * 4 {
            return fail(format_args!("row {r} has unexpected length {}", row.len()));
        }
        for count in row.chunks_exact(4) {
            let n = u32::from_be_bytes([count[0], count[1], count[2], count[3]]);
            pgm.push(n.min(255) as u8);
        }
    }
    if let Err(e) = write_atomic(&args.output, &pgm) {
        return fail(format_args!("cannot write {}: {e}", args.output.display()));
    }
    println!(
        "wrote {}x{} image to {}",
        args.width,
        args.height,
        args.output.display()
    );
    ExitCode::SUCCESS
}

async fn cmd_harness(cmd: HarnessCmd) -> ExitCode {
    match cmd {
        HarnessCmd::Run { scenario, trace } => {
            let raw = match std::fs::read_to_string(&scenario) {
                Ok(r) => r,
                Err(e) => return fail(format_args!("cannot read {}: {e}", scenario.display())),
            };
            let parsed = match Scenario::from_toml(&raw) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            // The simulation is synchronous and single-threaded; hop off
            // the async runtime to run it.
            let outcome = match tokio::task::spawn_blocking(move || run_scenario(&parsed)).await {
                Ok(Ok(o)) => o,
                Ok(Err(e)) => return fail(e),
                Err(e) => return fail(e),
            };
            if let Some(path) = trace {
                if let Err(e) = write_atomic(&path, outcome.trace.render().as_bytes()) {
                    return fail(format_args!("cannot write {}: {e}", path.display()));
                }
            }
            match outcome.result {
                Ok(outputs) => {
                    println!(
                        "ok: {} outputs, {} trace events, makespan {} ms virtual",
                        outputs.len(),
                        outcome.trace.entries.len(),
                        outcome.trace.makespan_ms().unwrap_or(0)
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => compute_exit(&e),
            }
        }
        HarnessCmd::Speedup {
            tasks,
            service_time_ms,
            workers,
            seed,
        } => {
            let report = tokio::task::spawn_blocking(move || {
                speedup_report(seed, tasks, service_time_ms, &workers)
            })
            .await;
            match report {
                Ok(r) => {
                    print!("{r}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}

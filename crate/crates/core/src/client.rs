//! The client runtime behind `compute`: discovers workers through the
//! registry (one synchronous query plus a standing subscription), recruits
//! each candidate, and runs one control thread per accepted worker. Control
//! threads pull tasks demand-driven from a shared repository, so faster
//! workers naturally serve more tasks. A worker that dies mid-task is
//! detected by connection loss or missed pongs; its task goes back to the
//! front of the queue and is re-executed from scratch elsewhere.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::task::{Poll, Waker};

use futures::channel::oneshot;
use futures::future::FutureExt;
use futures::{pin_mut, select_biased};
use thiserror::Error;

use crate::protocol::{
    Endpoint, JobPlan, Message, ServiceDescriptor, ServiceId, Task, TaskId, TaskResult,
};
use crate::runtime::{with_timeout, Conn, Env};
use crate::skeletons::{JobSpec, SkeletonError};
use crate::trace::TraceEvent;

pub const DEFAULT_REGISTRY_PORT: u16 = 7000;
pub const DEFAULT_PING_INTERVAL_MS: u64 = 2_000;
pub const DEFAULT_PING_TIMEOUT_MS: u64 = 2_000;
pub const DEFAULT_MAX_RETRIES: u32 = 5;
pub const DEFAULT_STARTUP_WINDOW_MS: u64 = 10_000;

const REGISTRY_REPLY_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone)]
pub struct ComputeConfig {
    pub registry: Endpoint,
    pub ping_interval_ms: u64,
    pub ping_timeout_ms: u64,
    /// 0 disables the per-task wall clock limit.
    pub task_timeout_ms: u64,
    pub max_retries: u32,
    pub min_services: usize,
    pub startup_window_ms: u64,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        ComputeConfig {
            registry: Endpoint {
                host: "127.0.0.1".into(),
                port: DEFAULT_REGISTRY_PORT,
            },
            ping_interval_ms: DEFAULT_PING_INTERVAL_MS,
            ping_timeout_ms: DEFAULT_PING_TIMEOUT_MS,
            task_timeout_ms: 0,
            max_retries: DEFAULT_MAX_RETRIES,
            min_services: 1,
            startup_window_ms: DEFAULT_STARTUP_WINDOW_MS,
        }
    }
}

impl ComputeConfig {
    fn validate(&self) -> Result<(), ComputeError> {
        let bad = |what: &str| Err(ComputeError::InvalidConfig(what.to_string()));
        if self.ping_interval_ms == 0 {
            return bad("ping_interval_ms must be positive");
        }
        if self.ping_timeout_ms == 0 {
            return bad("ping_timeout_ms must be positive");
        }
        if self.min_services == 0 {
            return bad("min_services must be at least 1");
        }
        if self.startup_window_ms == 0 {
            return bad("startup_window_ms must be positive");
        }
        if self.registry.host.is_empty() {
            return bad("registry host must not be empty");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("no services available")]
    NoServicesAvailable,
    #[error("task {} exceeded the retry limit", (.0).0)]
    TaskFailed(TaskId),
    #[error("registry unreachable at {0}")]
    RegistryUnreachable(Endpoint),
    #[error("input is empty")]
    EmptyInput,
    #[error("invalid job: {0}")]
    InvalidJob(#[from] SkeletonError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Outcome of handing a dead worker's task back.
#[derive(Debug, PartialEq, Eq)]
pub enum Requeue {
    Requeued,
    RetriesExhausted,
    AlreadySettled,
}

enum Next {
    Run(Task),
    Wait(u64),
    Finished,
}

struct RepoInner {
    payloads: Vec<Vec<u8>>,
    pending: VecDeque<TaskId>,
    in_flight: BTreeMap<TaskId, ServiceId>,
    results: BTreeMap<TaskId, TaskResult>,
    retries: BTreeMap<TaskId, u32>,
    failed: Option<TaskId>,
    cancelled: bool,
    epoch: u64,
    wakers: Vec<Waker>,
}

impl RepoInner {
    fn settled(&self) -> bool {
        self.cancelled || self.failed.is_some() || self.results.len() == self.payloads.len()
    }
}

/// The shared task state all control threads draw from.
///
/// Every task id is in exactly one of pending, in flight, or results
/// (a task that exhausted its retries is parked in the failure marker).
/// Results are append-only: a completed task is never re-dispatched, and
/// a late duplicate result is discarded.
pub struct TaskRepository {
    max_retries: u32,
    inner: Mutex<RepoInner>,
}

impl TaskRepository {
    pub fn new(payloads: Vec<Vec<u8>>, max_retries: u32) -> Self {
        let pending = (0..payloads.len() as u64).map(TaskId).collect();
        TaskRepository {
            max_retries,
            inner: Mutex::new(RepoInner {
                payloads,
                pending,
                in_flight: BTreeMap::new(),
                results: BTreeMap::new(),
                retries: BTreeMap::new(),
                failed: None,
                cancelled: false,
                epoch: 0,
                wakers: Vec::new(),
            }),
        }
    }

    fn bump(inner: &mut RepoInner) -> Vec<Waker> {
        inner.epoch += 1;
        std::mem::take(&mut inner.wakers)
    }

    fn next(&self, service: ServiceId) -> Next {
        let mut g = self.inner.lock().unwrap();
        if g.settled() {
            return Next::Finished;
        }
        match g.pending.pop_front() {
            Some(id) => {
                let payload = g.payloads[id.0 as usize].clone();
                g.in_flight.insert(id, service);
                Next::Run(Task { id, payload })
            }
            None => Next::Wait(g.epoch),
        }
    }

    /// Stores a result unless the task is already settled; first result
    /// wins when a reschedule raced the original worker.
    pub fn complete(&self, result: TaskResult) -> bool {
        let id = result.id;
        let wakers;
        let stored;
        {
            let mut g = self.inner.lock().unwrap();
            if g.results.contains_key(&id) || id.0 as usize >= g.payloads.len() {
                return false;
            }
            let tracked = g.in_flight.remove(&id).is_some() || {
                let before = g.pending.len();
                g.pending.retain(|p| *p != id);
                g.pending.len() != before
            };
            if tracked {
                g.results.insert(id, result);
            }
            stored = tracked;
            wakers = Self::bump(&mut g);
        }
        for w in wakers {
            w.wake();
        }
        stored
    }

    /// Returns a dead worker's task to the front of the queue, charging
    /// one retry. Only the worker recorded as holding the task may requeue
    /// it; anything else settled the task in the meantime.
    pub fn requeue(&self, service: ServiceId, id: TaskId) -> Requeue {
        let wakers;
        let verdict;
        {
            let mut g = self.inner.lock().unwrap();
            if g.in_flight.get(&id) != Some(&service) {
                return Requeue::AlreadySettled;
            }
            g.in_flight.remove(&id);
            let count = g.retries.entry(id).or_insert(0);
            *count += 1;
            if *count > self.max_retries {
                g.failed.get_or_insert(id);
                verdict = Requeue::RetriesExhausted;
            } else {
                g.pending.push_front(id);
                verdict = Requeue::Requeued;
            }
            wakers = Self::bump(&mut g);
        }
        for w in wakers {
            w.wake();
        }
        verdict
    }

    pub fn retry_count(&self, id: TaskId) -> u32 {
        self.inner
            .lock()
            .unwrap()
            .retries
            .get(&id)
            .copied()
            .unwrap_or(0)
    }

    pub fn pending_contains(&self, id: TaskId) -> bool {
        self.inner.lock().unwrap().pending.contains(&id)
    }

    /// Aborts the computation; control threads wind down at their next
    /// repository interaction.
    pub fn cancel(&self) {
        let wakers = {
            let mut g = self.inner.lock().unwrap();
            g.cancelled = true;
            Self::bump(&mut g)
        };
        for w in wakers {
            w.wake();
        }
    }

    pub fn epoch(&self) -> u64 {
        self.inner.lock().unwrap().epoch
    }

    /// Wakes any epoch waiters without changing task state; used by the
    /// surrounding machinery to piggyback its own condition changes.
    pub fn poke(&self) {
        let wakers = {
            let mut g = self.inner.lock().unwrap();
            Self::bump(&mut g)
        };
        for w in wakers {
            w.wake();
        }
    }

    /// Resolves once the epoch moves past `seen`.
    pub fn changed(&self, seen: u64) -> Changed<'_> {
        Changed { repo: self, seen }
    }

    /// `None` while running; `Some(Err)` if a task exhausted retries or the
    /// run was cancelled; `Some(Ok(outputs))` once every result is in,
    /// ordered by task id, i.e. input order.
    pub fn outcome(&self) -> Option<Result<Vec<Vec<u8>>, Option<TaskId>>> {
        let g = self.inner.lock().unwrap();
        if let Some(id) = g.failed {
            return Some(Err(Some(id)));
        }
        if g.cancelled {
            return Some(Err(None));
        }
        if g.results.len() == g.payloads.len() {
            let outputs = (0..g.payloads.len() as u64)
                .map(|i| g.results[&TaskId(i)].payload.clone())
                .collect();
            return Some(Ok(outputs));
        }
        None
    }

    /// Checks the partition invariant: every task id sits in exactly one
    /// of pending, in flight, results, or the failure marker.
    pub fn partition_ok(&self) -> bool {
        let g = self.inner.lock().unwrap();
        let n = g.payloads.len();
        let mut seen = vec![0u8; n];
        for id in &g.pending {
            seen[id.0 as usize] += 1;
        }
        for id in g.in_flight.keys() {
            seen[id.0 as usize] += 1;
        }
        for id in g.results.keys() {
            seen[id.0 as usize] += 1;
        }
        if let Some(id) = g.failed {
            seen[id.0 as usize] += 1;
        }
        seen.iter().all(|&c| c == 1)
    }
}

pub struct Changed<'a> {
    repo: &'a TaskRepository,
    seen: u64,
}

impl std::future::Future for Changed<'_> {
    type Output = u64;

    fn poll(self: std::pin::Pin<&mut Self>, cx: &mut std::task::Context<'_>) -> Poll<u64> {
        let mut g = self.repo.inner.lock().unwrap();
        if g.epoch > self.seen {
            Poll::Ready(g.epoch)
        } else {
            if !g.wakers.iter().any(|w| w.will_wake(cx.waker())) {
                g.wakers.push(cx.waker().clone());
            }
            Poll::Pending
        }
    }
}

struct CrewInner {
    recruited: BTreeSet<ServiceId>,
    accepted: usize,
    live: usize,
}

/// Recruitment bookkeeping shared by the listener and control threads.
struct Crew {
    inner: Mutex<CrewInner>,
}

struct Shared {
    env: Arc<dyn Env>,
    cfg: ComputeConfig,
    plan: JobPlan,
    repo: TaskRepository,
    crew: Crew,
}

impl Shared {
    fn mark_accepted(&self) {
        self.crew.inner.lock().unwrap().accepted += 1;
        self.repo.poke();
    }

    fn accepted(&self) -> usize {
        self.crew.inner.lock().unwrap().accepted
    }

    fn thread_done(&self) {
        self.crew.inner.lock().unwrap().live -= 1;
        self.repo.poke();
    }

    fn live(&self) -> usize {
        self.crew.inner.lock().unwrap().live
    }
}

/// Runs `job` over `input` on whatever matching workers the registry can
/// provide, blocking until every task has a result. Outputs are in input
/// order. All recruited workers have been released (or found dead) by the
/// time this returns.
pub async fn compute(
    env: Arc<dyn Env>,
    job: &JobSpec,
    input: Vec<Vec<u8>>,
    cfg: ComputeConfig,
) -> Result<Vec<Vec<u8>>, ComputeError> {
    cfg.validate()?;
    if input.is_empty() {
        return Err(ComputeError::EmptyInput);
    }
    let plan = job.to_plan()?;

    let unreachable = || ComputeError::RegistryUnreachable(cfg.registry.clone());
    // A registry that is still binding refuses for a moment; absorb that.
    let reg: Arc<dyn Conn> = {
        let mut attempts_left = 2;
        loop {
            match env.connect(&cfg.registry).await {
                Ok(c) => break c.into(),
                Err(_) if attempts_left > 0 => {
                    attempts_left -= 1;
                    env.sleep_ms(100).await;
                }
                Err(_) => return Err(unreachable()),
            }
        }
    };

    // Subscribe before querying, on the same connection: the registry
    // serves one connection in order, so anything registered after the
    // query's snapshot arrives as a notification. Duplicates between the
    // two paths are tolerated via ServiceId dedup.
    let filter = plan.stages[0].clone();
    reg.send(Message::Subscribe {
        filter: filter.clone(),
    })
    .await
    .map_err(|_| unreachable())?;
    reg.send(Message::Query { filter })
        .await
        .map_err(|_| unreachable())?;
    let discovered = match with_timeout(&*env, REGISTRY_REPLY_TIMEOUT_MS, reg.recv()).await {
        Some(Ok(Message::QueryReply { services })) => services,
        _ => return Err(unreachable()),
    };

    let max_retries = cfg.max_retries;
    let startup_window_ms = cfg.startup_window_ms;
    let min_services = cfg.min_services;
    let shared = Arc::new(Shared {
        env: env.clone(),
        cfg,
        plan,
        repo: TaskRepository::new(input, max_retries),
        crew: Crew {
            inner: Mutex::new(CrewInner {
                recruited: BTreeSet::new(),
                accepted: 0,
                live: 0,
            }),
        },
    });

    // Standing recruitment listener: turns Notify pushes into recruits
    // until told to stop. Dropping the registry connection on exit also
    // cancels the subscription server-side.
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    {
        let shared = shared.clone();
        let env2 = env.clone();
        env.spawn(Box::pin(async move {
            let mut stop = stop_rx.fuse();
            loop {
                let recv = reg.recv().fuse();
                pin_mut!(recv);
                select_biased! {
                    _ = stop => break,
                    r = recv => match r {
                        Ok(Message::Notify { service }) => {
                            env2.emit(TraceEvent::Notified { service: service.service_id });
                            try_recruit(&shared, service);
                        }
                        Ok(_) => {}
                        Err(_) => break,
                    },
                }
            }
        }));
    }

    for desc in discovered {
        try_recruit(&shared, desc);
    }

    // Main wait: progress is signalled through the repository epoch. The
    // startup window only matters until enough workers have accepted.
    let deadline = env.now_ms() + startup_window_ms;
    let mut window_open = true;
    let outcome = loop {
        if let Some(out) = shared.repo.outcome() {
            break out;
        }
        if window_open && shared.accepted() >= min_services {
            window_open = false;
        }
        let epoch = shared.repo.epoch();
        if window_open {
            let now = env.now_ms();
            if now >= deadline {
                if shared.accepted() < min_services {
                    shared.repo.cancel();
                    break Err(None);
                }
                window_open = false;
                continue;
            }
            let _ = with_timeout(&*env, deadline - now, shared.repo.changed(epoch)).await;
        } else {
            shared.repo.changed(epoch).await;
        }
    };

    let _ = stop_tx.send(());
    // Wait for every control thread to wind down (each sends Release on
    // its way out when its worker is still alive).
    loop {
        let epoch = shared.repo.epoch();
        if shared.live() == 0 {
            break;
        }
        shared.repo.changed(epoch).await;
    }

    match outcome {
        Ok(outputs) => Ok(outputs),
        Err(Some(id)) => Err(ComputeError::TaskFailed(id)),
        Err(None) => Err(ComputeError::NoServicesAvailable),
    }
}

/// Recruits a discovered or notified worker unless it cannot run the job
/// or was already recruited under this ServiceId.
fn try_recruit(shared: &Arc<Shared>, desc: ServiceDescriptor) {
    if !shared
        .plan
        .stages
        .iter()
        .all(|s| desc.processors.contains(s))
    {
        return;
    }
    {
        let mut crew = shared.crew.inner.lock().unwrap();
        if !crew.recruited.insert(desc.service_id) {
            return;
        }
        crew.live += 1;
    }
    let shared = shared.clone();
    shared.env.clone().spawn(Box::pin(async move {
        control_thread(&shared, desc).await;
        shared.thread_done();
    }));
}

/// One recruited worker's dedicated driver: Algorithm 1's per-service
/// control thread.
async fn control_thread(sh: &Shared, desc: ServiceDescriptor) {
    let env = &*sh.env;
    let service = desc.service_id;
    let handshake_ms = sh.cfg.ping_interval_ms + sh.cfg.ping_timeout_ms;

    // Recruit handshake; any failure here is silent (the worker may have
    // been taken by another client first).
    let conn = match with_timeout(env, handshake_ms, env.connect(&desc.endpoint)).await {
        Some(Ok(c)) => c,
        _ => return,
    };
    if conn
        .send(Message::Recruit {
            job: sh.plan.clone(),
            nonce: env.rand_u64(),
        })
        .await
        .is_err()
    {
        return;
    }
    match with_timeout(env, handshake_ms, conn.recv()).await {
        Some(Ok(Message::RecruitAck { accept: true })) => {}
        _ => return,
    }
    env.emit(TraceEvent::Recruited { service });
    sh.mark_accepted();

    loop {
        match sh.repo.next(service) {
            Next::Run(task) => {
                env.emit(TraceEvent::Assigned {
                    task: task.id,
                    service,
                });
                if conn
                    .send(Message::AssignTask { task: task.clone() })
                    .await
                    .is_err()
                {
                    return abandon(sh, service, Some(task.id));
                }
                match await_task_done(env, &sh.cfg, &*conn, task.id).await {
                    Some(result) => {
                        env.emit(TraceEvent::Completed {
                            task: task.id,
                            service,
                        });
                        sh.repo.complete(result);
                    }
                    None => return abandon(sh, service, Some(task.id)),
                }
            }
            Next::Wait(epoch) => {
                // Keep an eye on the connection while idle so a worker
                // death during a queue drought is noticed promptly.
                let changed = sh.repo.changed(epoch).fuse();
                pin_mut!(changed);
                let recv = conn.recv().fuse();
                pin_mut!(recv);
                select_biased! {
                    _ = changed => {}
                    r = recv => match r {
                        // A pong from just before TaskDone may still be in
                        // flight; everything else is a dead or confused
                        // worker.
                        Ok(Message::Pong) => {}
                        _ => return abandon(sh, service, None),
                    },
                }
            }
            Next::Finished => break,
        }
    }

    let _ = conn.send(Message::Release).await;
    env.emit(TraceEvent::Released { service });
}

/// Worker declared dead: charge the in-flight task (if any) back to the
/// queue and drop the worker.
fn abandon(sh: &Shared, service: ServiceId, task: Option<TaskId>) {
    sh.env.emit(TraceEvent::Failed { service });
    if let Some(id) = task {
        if sh.repo.requeue(service, id) == Requeue::Requeued {
            sh.env.emit(TraceEvent::Rescheduled { task: id });
        }
    }
}

/// Waits for this task's TaskDone while keeping the liveness probe going:
/// a ping every `ping_interval_ms` of silence, death after an unanswered
/// ping ages past `ping_timeout_ms` (or the task deadline passes).
async fn await_task_done(
    env: &dyn Env,
    cfg: &ComputeConfig,
    conn: &dyn Conn,
    expect: TaskId,
) -> Option<TaskResult> {
    let started = env.now_ms();
    let mut next_ping_at = started + cfg.ping_interval_ms;
    let mut ping_sent_at: Option<u64> = None;
    let task_deadline =
        (cfg.task_timeout_ms > 0).then(|| started.saturating_add(cfg.task_timeout_ms));

    loop {
        let now = env.now_ms();
        let mut deadline = match ping_sent_at {
            Some(at) => at + cfg.ping_timeout_ms,
            None => next_ping_at,
        };
        if let Some(td) = task_deadline {
            deadline = deadline.min(td);
        }

        if deadline <= now {
            if let Some(td) = task_deadline {
                if td <= now {
                    return None;
                }
            }
            if let Some(at) = ping_sent_at {
                if at + cfg.ping_timeout_ms <= now {
                    return None;
                }
            } else if next_ping_at <= now {
                if conn.send(Message::Ping).await.is_err() {
                    return None;
                }
                let sent = env.now_ms();
                ping_sent_at = Some(sent);
                next_ping_at = sent + cfg.ping_interval_ms;
            }
            continue;
        }

        match with_timeout(env, deadline - now, conn.recv()).await {
            None => continue,
            Some(Ok(Message::TaskDone { result })) if result.id == expect => return Some(result),
            Some(Ok(Message::Pong)) => {
                ping_sent_at = None;
                next_ping_at = env.now_ms() + cfg.ping_interval_ms;
            }
            _ => return None,
        }
    }
}

//! The service daemon. Its whole life is a loop: register with the
//! registry, wait to be recruited while renewing the lease, unregister,
//! serve exactly one client until released or disconnected, re-register.
//!
//! While serving, two duties run concurrently: the connection loop keeps
//! answering pings (and rejecting stray recruit attempts from other
//! clients), while the current task runs through its processor pipeline
//! off the connection path. A processor panic closes the client connection
//! without a reply; the client's ordinary fault handling reschedules the
//! task elsewhere.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use futures::future::{select, Either, FutureExt};
use futures::{pin_mut, select_biased};
use thiserror::Error;

use crate::processors::{Processor, ProcessorError, ProcessorTable};
use crate::protocol::{Endpoint, JobPlan, Message, ServiceId, ServiceInfo, TaskResult};
use crate::runtime::{with_timeout, Conn, Env, Listener, NetError};
use crate::trace::TraceEvent;

pub const DEFAULT_LEASE_MS: u64 = 30_000;
pub const DEFAULT_RENEW_MS: u64 = 10_000;

const BACKOFF_START_MS: u64 = 500;
const BACKOFF_CAP_MS: u64 = 30_000;
const HANDSHAKE_TIMEOUT_MS: u64 = 5_000;
const REGISTRY_REPLY_TIMEOUT_MS: u64 = 5_000;

#[derive(Clone)]
pub struct WorkerConfig {
    pub registry: Endpoint,
    pub bind: Endpoint,
    /// Endpoint to publish in the registry; defaults to the bound one.
    /// Needed when binding a wildcard address.
    pub advertise: Option<Endpoint>,
    pub table: ProcessorTable,
    pub lease_ms: u64,
    pub renew_ms: u64,
}

impl WorkerConfig {
    pub fn new(registry: Endpoint, bind: Endpoint, table: ProcessorTable) -> Self {
        WorkerConfig {
            registry,
            bind,
            advertise: None,
            table,
            lease_ms: DEFAULT_LEASE_MS,
            renew_ms: DEFAULT_RENEW_MS,
        }
    }

    fn validate(&self) -> Result<(), WorkerError> {
        if self.table.is_empty() {
            return Err(WorkerError::InvalidConfig(
                "processor table is empty".into(),
            ));
        }
        if self.renew_ms == 0 || self.renew_ms >= self.lease_ms {
            return Err(WorkerError::InvalidConfig(format!(
                "renew_ms {} must be positive and below lease_ms {}",
                self.renew_ms, self.lease_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("invalid worker config: {0}")]
    InvalidConfig(String),
    #[error("registry rejected the registration")]
    RegistrationRejected,
    #[error(transparent)]
    Net(#[from] NetError),
}

type Registration = Option<(Arc<dyn Conn>, ServiceId)>;

/// Runs the worker until `shutdown` resolves (then best-effort
/// unregisters) or a fatal error occurs. Registry outages are survived by
/// re-connecting with exponential backoff; a rejected registration is
/// fatal since it means the configuration can never be accepted.
pub async fn worker_main(
    env: Arc<dyn Env>,
    cfg: WorkerConfig,
    shutdown: impl Future<Output = ()> + Send,
) -> Result<(), WorkerError> {
    cfg.validate()?;
    let listener = env.listen(&cfg.bind).await?;
    let advertise = cfg.advertise.clone().unwrap_or_else(|| listener.local());
    let current: Arc<Mutex<Registration>> = Arc::new(Mutex::new(None));

    let lifecycle = run_loop(&env, &cfg, &*listener, advertise, &current);
    pin_mut!(lifecycle);
    pin_mut!(shutdown);
    match select(lifecycle, shutdown).await {
        Either::Left((err, _)) => Err(err),
        Either::Right(((), _)) => {
            let reg = current.lock().unwrap().take();
            if let Some((conn, id)) = reg {
                let unregister = conn.send(Message::Unregister { id });
                let _ = with_timeout(&*env, 1_000, unregister).await;
            }
            Ok(())
        }
    }
}

async fn run_loop(
    env: &Arc<dyn Env>,
    cfg: &WorkerConfig,
    listener: &dyn Listener,
    advertise: Endpoint,
    current: &Mutex<Registration>,
) -> WorkerError {
    let info = ServiceInfo {
        endpoint: advertise,
        processors: cfg.table.names().map(String::from).collect(),
        attributes: BTreeMap::new(),
    };

    'outer: loop {
        let reg: Arc<dyn Conn> = {
            let mut backoff = BACKOFF_START_MS;
            loop {
                match env.connect(&cfg.registry).await {
                    Ok(c) => break c.into(),
                    Err(_) => {
                        env.sleep_ms(backoff).await;
                        backoff = (backoff * 2).min(BACKOFF_CAP_MS);
                    }
                }
            }
        };

        'registered: loop {
            let register = Message::Register {
                info: info.clone(),
                lease_ms: cfg.lease_ms,
            };
            if reg.send(register).await.is_err() {
                continue 'outer;
            }
            let my_id = match with_timeout(&**env, REGISTRY_REPLY_TIMEOUT_MS, reg.recv()).await {
                Some(Ok(Message::RegisterAck { id, .. })) => {
                    if id == ServiceId(0) {
                        return WorkerError::RegistrationRejected;
                    }
                    id
                }
                _ => continue 'outer,
            };
            env.emit(TraceEvent::Registered { service: my_id });
            *current.lock().unwrap() = Some((reg.clone(), my_id));

            // Registered: wait to be recruited, renewing the lease on time.
            let mut next_renew_at = env.now_ms() + cfg.renew_ms;
            let entry = loop {
                let now = env.now_ms();
                if next_renew_at <= now {
                    match renew(env, cfg, &reg, my_id).await {
                        Renewal::Ok => next_renew_at = env.now_ms() + cfg.renew_ms,
                        Renewal::LeaseLost => {
                            current.lock().unwrap().take();
                            continue 'registered;
                        }
                        Renewal::RegistryLost => {
                            current.lock().unwrap().take();
                            continue 'outer;
                        }
                    }
                    continue;
                }
                let pause = env.sleep_ms(next_renew_at - now);
                pin_mut!(pause);
                let accept = listener.accept();
                pin_mut!(accept);
                match select(accept, pause).await {
                    Either::Left((Ok(conn), _)) => {
                        match handshake(env, cfg, &reg, my_id, conn.into(), current).await {
                            Handshake::Serve(conn, instances) => break (conn, instances),
                            Handshake::StayRegistered => {}
                            Handshake::ReRegister => continue 'registered,
                        }
                    }
                    Either::Left((Err(e), _)) => return WorkerError::Net(e),
                    Either::Right(((), _)) => {}
                }
            };
            let (serve_conn, instances) = entry;
            serve(env, &serve_conn, listener, my_id, instances).await;
            drop(serve_conn);
            // Dropping the client connection (normal or fault path) is the
            // signal the client acts on; then rejoin the pool.
            continue 'registered;
        }
    }
}

enum Renewal {
    Ok,
    LeaseLost,
    RegistryLost,
}

async fn renew(
    env: &Arc<dyn Env>,
    cfg: &WorkerConfig,
    reg: &Arc<dyn Conn>,
    my_id: ServiceId,
) -> Renewal {
    let msg = Message::Renew {
        id: my_id,
        lease_ms: cfg.lease_ms,
    };
    if reg.send(msg).await.is_err() {
        return Renewal::RegistryLost;
    }
    match with_timeout(&**env, REGISTRY_REPLY_TIMEOUT_MS, reg.recv()).await {
        Some(Ok(Message::RenewAck { lease_expiry_ms })) => {
            if lease_expiry_ms == 0 {
                // Lease already expired there; start over with a fresh id.
                Renewal::LeaseLost
            } else {
                Renewal::Ok
            }
        }
        _ => Renewal::RegistryLost,
    }
}

enum Handshake {
    Serve(Arc<dyn Conn>, Vec<Option<Box<dyn Processor>>>),
    StayRegistered,
    ReRegister,
}

/// Decides one incoming recruit attempt. Acceptance order matters: the
/// worker leaves the registry before confirming, so no second client can
/// discover it in the recruited state.
async fn handshake(
    env: &Arc<dyn Env>,
    cfg: &WorkerConfig,
    reg: &Arc<dyn Conn>,
    my_id: ServiceId,
    conn: Arc<dyn Conn>,
    current: &Mutex<Registration>,
) -> Handshake {
    let plan = match with_timeout(&**env, HANDSHAKE_TIMEOUT_MS, conn.recv()).await {
        Some(Ok(Message::Recruit { job, .. })) => job,
        _ => return Handshake::StayRegistered,
    };
    let instances = match instantiate(&cfg.table, &plan) {
        Ok(v) => v,
        Err(_) => {
            let _ = conn.send(Message::RecruitAck { accept: false }).await;
            return Handshake::StayRegistered;
        }
    };
    current.lock().unwrap().take();
    let _ = reg.send(Message::Unregister { id: my_id }).await;
    if conn
        .send(Message::RecruitAck { accept: true })
        .await
        .is_err()
    {
        return Handshake::ReRegister;
    }
    Handshake::Serve(conn, instances)
}

fn instantiate(
    table: &ProcessorTable,
    plan: &JobPlan,
) -> Result<Vec<Option<Box<dyn Processor>>>, ProcessorError> {
    Ok(table
        .instantiate_plan(plan)?
        .into_iter()
        .map(Some)
        .collect())
}

/// Serves the one recruiting client until Release, disconnect, a protocol
/// violation, or a processor failure.
async fn serve(
    env: &Arc<dyn Env>,
    conn: &Arc<dyn Conn>,
    listener: &dyn Listener,
    my_id: ServiceId,
    mut instances: Vec<Option<Box<dyn Processor>>>,
) {
    loop {
        // Idle: wait for the client, shooing away other recruiters.
        let msg = {
            let mut m = None;
            while m.is_none() {
                let recv = conn.recv().fuse();
                pin_mut!(recv);
                let stray = listener.accept().fuse();
                pin_mut!(stray);
                select_biased! {
                    r = recv => match r {
                        Ok(got) => m = Some(got),
                        Err(_) => return,
                    },
                    a = stray => {
                        if let Ok(c) = a {
                            reject_busy(env, c);
                        }
                    }
                }
            }
            m.unwrap()
        };

        match msg {
            Message::Ping => {
                if conn.send(Message::Pong).await.is_err() {
                    return;
                }
            }
            Message::Release => return,
            Message::AssignTask { task } => {
                let id = task.id;
                let pipeline = run_pipeline(env.clone(), &mut instances, task.payload).fuse();
                pin_mut!(pipeline);
                let output = loop {
                    let recv = conn.recv().fuse();
                    pin_mut!(recv);
                    let stray = listener.accept().fuse();
                    pin_mut!(stray);
                    select_biased! {
                        res = pipeline => break res,
                        r = recv => match r {
                            Ok(Message::Ping) => {
                                if conn.send(Message::Pong).await.is_err() {
                                    return;
                                }
                            }
                            // Release or anything else mid-task: abandon.
                            _ => return,
                        },
                        a = stray => {
                            if let Ok(c) = a {
                                reject_busy(env, c);
                            }
                        }
                    }
                };
                match output {
                    Ok(payload) => {
                        let result = TaskResult {
                            id,
                            payload,
                            worker: my_id,
                        };
                        if conn.send(Message::TaskDone { result }).await.is_err() {
                            return;
                        }
                    }
                    Err(_) => return,
                }
            }
            _ => return,
        }
    }
}

async fn run_pipeline(
    env: Arc<dyn Env>,
    instances: &mut [Option<Box<dyn Processor>>],
    input: Vec<u8>,
) -> Result<Vec<u8>, ProcessorError> {
    let mut payload = input;
    for slot in instances.iter_mut() {
        let inst = slot.take().expect("pipeline instance present");
        let (inst, out) = env.run_processor(inst, payload).await?;
        *slot = Some(inst);
        payload = out;
    }
    Ok(payload)
}

fn reject_busy(env: &Arc<dyn Env>, conn: Box<dyn Conn>) {
    let env2 = env.clone();
    env.spawn(Box::pin(async move {
        let nack = conn.send(Message::RecruitAck { accept: false });
        let _ = with_timeout(&*env2, 1_000, nack).await;
    }));
}

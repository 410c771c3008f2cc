//! The lookup service: leased service registrations, synchronous queries,
//! and asynchronous arrival notifications to subscribed observers.
//!
//! State is soft: everything is rebuilt by worker re-registration after a
//! restart. Liveness is lease-based; queries and renewals check expiry
//! against the current clock themselves, the periodic sweep only reclaims
//! memory. Observers are told about arrivals, never departures; clients
//! detect departed workers through their own ping traffic.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use futures::channel::mpsc;
use futures::future::{select, Either};
use futures::pin_mut;
use futures::stream::StreamExt;
use thiserror::Error;

use crate::protocol::{Endpoint, Message, ServiceDescriptor, ServiceId, ServiceInfo};
use crate::runtime::{Conn, Env, NetError};

pub const DEFAULT_SWEEP_INTERVAL_MS: u64 = 5_000;
pub const MIN_LEASE_MS: u64 = 1_000;
pub const DEFAULT_MAX_LEASE_MS: u64 = 3_600_000;

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub sweep_interval_ms: u64,
    pub min_lease_ms: u64,
    pub max_lease_ms: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            sweep_interval_ms: DEFAULT_SWEEP_INTERVAL_MS,
            min_lease_ms: MIN_LEASE_MS,
            max_lease_ms: DEFAULT_MAX_LEASE_MS,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("lease {lease_ms} ms outside [{min_ms}, {max_ms}] ms")]
    InvalidLease {
        lease_ms: u64,
        min_ms: u64,
        max_ms: u64,
    },
    #[error("malformed descriptor: {0}")]
    MalformedDescriptor(String),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
}

/// `true` if a registration with `info` is of interest under `filter`.
/// The empty filter matches everything.
pub fn filter_matches(filter: &str, info: &ServiceInfo) -> bool {
    filter.is_empty() || info.processors.contains(filter)
}

#[derive(Debug, Clone)]
struct Entry {
    info: ServiceInfo,
    lease_expiry_ms: u64,
}

/// The pure registration table. All methods take the clock explicitly so
/// tests can drive a virtual one. An entry is dead once `now >= expiry`.
#[derive(Debug)]
pub struct RegistryState {
    next_id: u128,
    entries: BTreeMap<ServiceId, Entry>,
}

impl RegistryState {
    pub fn new() -> Self {
        // Id 0 is the wire sentinel for "rejected", never issued.
        RegistryState {
            next_id: 1,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        now_ms: u64,
        info: ServiceInfo,
        lease_ms: u64,
        cfg: &RegistryConfig,
    ) -> Result<ServiceDescriptor, RegistryError> {
        if lease_ms < cfg.min_lease_ms || lease_ms > cfg.max_lease_ms {
            return Err(RegistryError::InvalidLease {
                lease_ms,
                min_ms: cfg.min_lease_ms,
                max_ms: cfg.max_lease_ms,
            });
        }
        if info.processors.is_empty() {
            return Err(RegistryError::MalformedDescriptor("no processors".into()));
        }
        if info.endpoint.host.is_empty() {
            return Err(RegistryError::MalformedDescriptor("empty host".into()));
        }
        let id = ServiceId(self.next_id);
        self.next_id += 1;
        let lease_expiry_ms = now_ms + lease_ms;
        self.entries.insert(
            id,
            Entry {
                info: info.clone(),
                lease_expiry_ms,
            },
        );
        Ok(ServiceDescriptor {
            service_id: id,
            endpoint: info.endpoint,
            processors: info.processors,
            lease_expiry_ms,
            attributes: info.attributes,
        })
    }

    /// Idempotent; removing an absent id is a successful no-op.
    pub fn unregister(&mut self, id: ServiceId) {
        self.entries.remove(&id);
    }

    pub fn renew(
        &mut self,
        now_ms: u64,
        id: ServiceId,
        lease_ms: u64,
        cfg: &RegistryConfig,
    ) -> Result<u64, RegistryError> {
        if lease_ms < cfg.min_lease_ms || lease_ms > cfg.max_lease_ms {
            return Err(RegistryError::InvalidLease {
                lease_ms,
                min_ms: cfg.min_lease_ms,
                max_ms: cfg.max_lease_ms,
            });
        }
        let entry = self
            .entries
            .get_mut(&id)
            .filter(|e| e.lease_expiry_ms > now_ms)
            .ok_or(RegistryError::UnknownService(id))?;
        entry.lease_expiry_ms = now_ms + lease_ms;
        Ok(entry.lease_expiry_ms)
    }

    /// Live entries whose processors contain `filter`, in id order.
    pub fn query(&self, now_ms: u64, filter: &str) -> Vec<ServiceDescriptor> {
        self.entries
            .iter()
            .filter(|(_, e)| e.lease_expiry_ms > now_ms)
            .filter(|(_, e)| filter_matches(filter, &e.info))
            .map(|(id, e)| ServiceDescriptor {
                service_id: *id,
                endpoint: e.info.endpoint.clone(),
                processors: e.info.processors.clone(),
                lease_expiry_ms: e.lease_expiry_ms,
                attributes: e.info.attributes.clone(),
            })
            .collect()
    }

    /// Drops expired entries; returns how many were reclaimed.
    pub fn sweep(&mut self, now_ms: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| e.lease_expiry_ms > now_ms);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for RegistryState {
    fn default() -> Self {
        Self::new()
    }
}

struct Subscription {
    filter: String,
    sender: mpsc::UnboundedSender<ServiceDescriptor>,
}

struct Core {
    state: RegistryState,
    subs: BTreeMap<u64, Subscription>,
    next_sub: u64,
}

/// Binds the registry and spawns its accept loop and sweeper onto `env`.
/// Returns the bound endpoint (with port 0 resolved). The service runs
/// until the environment is torn down.
pub async fn start_registry(
    env: Arc<dyn Env>,
    bind: &Endpoint,
    cfg: RegistryConfig,
) -> Result<Endpoint, NetError> {
    let listener = env.listen(bind).await?;
    let local = listener.local();
    let core = Arc::new(Mutex::new(Core {
        state: RegistryState::new(),
        subs: BTreeMap::new(),
        next_sub: 0,
    }));

    {
        let env2 = env.clone();
        let core2 = core.clone();
        let sweep_ms = cfg.sweep_interval_ms.max(1);
        env.spawn(Box::pin(async move {
            loop {
                env2.sleep_ms(sweep_ms).await;
                let now = env2.now_ms();
                core2.lock().unwrap().state.sweep(now);
            }
        }));
    }

    let env2 = env.clone();
    env.spawn(Box::pin(async move {
        while let Ok(conn) = listener.accept().await {
            let env3 = env2.clone();
            let core3 = core.clone();
            let cfg3 = cfg.clone();
            env2.spawn(Box::pin(async move {
                handle_conn(env3, core3, cfg3, conn.into()).await;
            }));
        }
    }));
    Ok(local)
}

enum Turn {
    Incoming(Result<Message, NetError>),
    Notify(ServiceDescriptor),
}

async fn handle_conn(
    env: Arc<dyn Env>,
    core: Arc<Mutex<Core>>,
    cfg: RegistryConfig,
    conn: Arc<dyn Conn>,
) {
    let (tx, mut rx) = mpsc::unbounded();
    // Holding one sender locally keeps `rx` open even before Subscribe.
    let _keepalive = tx.clone();
    let mut sub_id: Option<u64> = None;

    loop {
        let turn = {
            let incoming = conn.recv();
            pin_mut!(incoming);
            let note = rx.next();
            pin_mut!(note);
            match select(incoming, note).await {
                Either::Left((res, _)) => Turn::Incoming(res),
                Either::Right((opt, _)) => Turn::Notify(opt.expect("keepalive sender held")),
            }
        };
        let outcome = match turn {
            Turn::Incoming(Ok(msg)) => {
                handle_message(&*env, &core, &cfg, &conn, msg, &tx, &mut sub_id).await
            }
            Turn::Incoming(Err(_)) => break,
            Turn::Notify(desc) => conn
                .send(Message::Notify { service: desc })
                .await
                .map(|_| true),
        };
        match outcome {
            Ok(true) => {}
            _ => break,
        }
    }

    if let Some(id) = sub_id {
        core.lock().unwrap().subs.remove(&id);
    }
}

/// Ok(false) asks the caller to close the connection politely.
async fn handle_message(
    env: &dyn Env,
    core: &Mutex<Core>,
    cfg: &RegistryConfig,
    conn: &Arc<dyn Conn>,
    msg: Message,
    tx: &mpsc::UnboundedSender<ServiceDescriptor>,
    sub_id: &mut Option<u64>,
) -> Result<bool, NetError> {
    match msg {
        Message::Register { info, lease_ms } => {
            let now = env.now_ms();
            let (ack, notify) = {
                let mut core = core.lock().unwrap();
                match core.state.register(now, info, lease_ms, cfg) {
                    Ok(desc) => {
                        let targets: Vec<_> = core
                            .subs
                            .values()
                            .filter(|s| filter_matches(&s.filter, &desc.info()))
                            .map(|s| s.sender.clone())
                            .collect();
                        (
                            Message::RegisterAck {
                                id: desc.service_id,
                                lease_expiry_ms: desc.lease_expiry_ms,
                            },
                            Some((desc, targets)),
                        )
                    }
                    Err(_) => (
                        Message::RegisterAck {
                            id: ServiceId(0),
                            lease_expiry_ms: 0,
                        },
                        None,
                    ),
                }
            };
            if let Some((desc, targets)) = notify {
                for t in targets {
                    let _ = t.unbounded_send(desc.clone());
                }
            }
            conn.send(ack).await?;
            Ok(true)
        }
        Message::Renew { id, lease_ms } => {
            let now = env.now_ms();
            let expiry = core
                .lock()
                .unwrap()
                .state
                .renew(now, id, lease_ms, cfg)
                .unwrap_or(0);
            conn.send(Message::RenewAck {
                lease_expiry_ms: expiry,
            })
            .await?;
            Ok(true)
        }
        Message::Unregister { id } => {
            core.lock().unwrap().state.unregister(id);
            Ok(true)
        }
        Message::Query { filter } => {
            let now = env.now_ms();
            let services = core.lock().unwrap().state.query(now, &filter);
            conn.send(Message::QueryReply { services }).await?;
            Ok(true)
        }
        Message::Subscribe { filter } => {
            let mut core = core.lock().unwrap();
            let id = core.next_sub;
            core.next_sub += 1;
            if let Some(old) = sub_id.replace(id) {
                core.subs.remove(&old);
            }
            core.subs.insert(
                id,
                Subscription {
                    filter,
                    sender: tx.clone(),
                },
            );
            Ok(true)
        }
        Message::Ping => {
            conn.send(Message::Pong).await?;
            Ok(true)
        }
        // Anything else is a protocol violation from this peer.
        _ => Ok(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::TokioEnv;
    use std::collections::BTreeSet;

    fn info(host: &str, procs: &[&str]) -> ServiceInfo {
        ServiceInfo {
            endpoint: Endpoint {
                host: host.into(),
                port: 9000,
            },
            processors: procs.iter().map(|s| s.to_string()).collect(),
            attributes: BTreeMap::new(),
        }
    }

    fn cfg() -> RegistryConfig {
        RegistryConfig::default()
    }

    #[test]
    fn register_issues_fresh_ids_and_expiry() {
        let mut st = RegistryState::new();
        let a = st
            .register(100, info("h1", &["identity"]), 30_000, &cfg())
            .unwrap();
        let b = st
            .register(100, info("h1", &["identity"]), 30_000, &cfg())
            .unwrap();
        assert_eq!(a.service_id, ServiceId(1));
        assert_eq!(b.service_id, ServiceId(2));
        assert_eq!(a.lease_expiry_ms, 30_100);
    }

    #[test]
    fn lease_bounds_are_validated_not_clamped() {
        let mut st = RegistryState::new();
        let c = cfg();
        assert!(matches!(
            st.register(0, info("h", &["x"]), MIN_LEASE_MS - 1, &c),
            Err(RegistryError::InvalidLease { .. })
        ));
        assert!(matches!(
            st.register(0, info("h", &["x"]), DEFAULT_MAX_LEASE_MS + 1, &c),
            Err(RegistryError::InvalidLease { .. })
        ));
        assert!(st.register(0, info("h", &["x"]), MIN_LEASE_MS, &c).is_ok());
        assert!(st
            .register(0, info("h", &["x"]), DEFAULT_MAX_LEASE_MS, &c)
            .is_ok());
    }

    #[test]
    fn malformed_descriptors_are_rejected() {
        let mut st = RegistryState::new();
        assert!(matches!(
            st.register(0, info("h", &[]), 30_000, &cfg()),
            Err(RegistryError::MalformedDescriptor(_))
        ));
        let mut bad = info("", &["identity"]);
        bad.endpoint.host.clear();
        assert!(matches!(
            st.register(0, bad, 30_000, &cfg()),
            Err(RegistryError::MalformedDescriptor(_))
        ));
        assert!(st.is_empty());
    }

    #[test]
    fn unregister_is_idempotent() {
        let mut st = RegistryState::new();
        let d = st.register(0, info("h", &["x"]), 30_000, &cfg()).unwrap();
        st.unregister(d.service_id);
        assert!(st.query(1, "").is_empty());
        st.unregister(d.service_id);
        st.unregister(ServiceId(999));
        assert!(st.is_empty());
    }

    #[test]
    fn query_filters_by_processor_and_liveness() {
        let mut st = RegistryState::new();
        let c = cfg();
        st.register(0, info("h1", &["identity", "delay"]), 1_000, &c)
            .unwrap();
        st.register(0, info("h2", &["mandelbrot-row"]), 30_000, &c)
            .unwrap();

        let all = st.query(1, "");
        assert_eq!(all.len(), 2);
        let m = st.query(1, "mandelbrot-row");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].endpoint.host, "h2");
        assert!(st.query(1, "hash-search").is_empty());

        // h1 expires at exactly t=1000; an entry at its expiry is dead.
        assert_eq!(st.query(1_000, "").len(), 1);
        assert_eq!(st.query(999, "").len(), 2);
    }

    #[test]
    fn renew_extends_and_rejects_expired() {
        let mut st = RegistryState::new();
        let c = cfg();
        let d = st.register(0, info("h", &["x"]), 1_000, &c).unwrap();
        assert_eq!(st.renew(500, d.service_id, 2_000, &c).unwrap(), 2_500);
        assert_eq!(st.query(2_499, "").len(), 1);
        assert_eq!(
            st.renew(2_500, d.service_id, 2_000, &c),
            Err(RegistryError::UnknownService(d.service_id))
        );
        assert_eq!(
            st.renew(0, ServiceId(77), 2_000, &c),
            Err(RegistryError::UnknownService(ServiceId(77)))
        );
    }

    #[test]
    fn sweep_reclaims_only_expired() {
        let mut st = RegistryState::new();
        let c = cfg();
        st.register(0, info("h1", &["x"]), 1_000, &c).unwrap();
        st.register(0, info("h2", &["x"]), 5_000, &c).unwrap();
        assert_eq!(st.sweep(999), 0);
        assert_eq!(st.len(), 2);
        assert_eq!(st.sweep(1_000), 1);
        assert_eq!(st.len(), 1);
        assert_eq!(st.sweep(10_000), 1);
        assert!(st.is_empty());
    }

    #[test]
    fn filter_matching() {
        let i = info("h", &["identity", "delay"]);
        assert!(filter_matches("", &i));
        assert!(filter_matches("identity", &i));
        assert!(!filter_matches("mandelbrot-row", &i));
    }

    async fn recv_or_panic(conn: &dyn Conn) -> Message {
        crate::runtime::with_timeout(&*TokioEnv::new(), 5_000, conn.recv())
            .await
            .expect("timed out")
            .expect("recv failed")
    }

    #[tokio::test]
    async fn tcp_register_query_subscribe_flow() {
        let env: Arc<dyn Env> = TokioEnv::new();
        let bind = Endpoint {
            host: "127.0.0.1".into(),
            port: 0,
        };
        let addr = start_registry(env.clone(), &bind, RegistryConfig::default())
            .await
            .unwrap();

        // Observer subscribes for mandelbrot workers.
        let observer = env.connect(&addr).await.unwrap();
        observer
            .send(Message::Subscribe {
                filter: "mandelbrot-row".into(),
            })
            .await
            .unwrap();
        // Query on the same connection to be sure Subscribe is processed.
        observer
            .send(Message::Query {
                filter: String::new(),
            })
            .await
            .unwrap();
        assert_eq!(
            recv_or_panic(&*observer).await,
            Message::QueryReply { services: vec![] }
        );

        // A worker registers something the observer does not care about.
        let worker = env.connect(&addr).await.unwrap();
        worker
            .send(Message::Register {
                info: info("127.0.0.1", &["identity"]),
                lease_ms: 30_000,
            })
            .await
            .unwrap();
        let id1 = match recv_or_panic(&*worker).await {
            Message::RegisterAck {
                id,
                lease_expiry_ms,
            } => {
                assert_ne!(id, ServiceId(0));
                assert!(lease_expiry_ms > 0);
                id
            }
            other => panic!("unexpected {other:?}"),
        };

        // And then one it does.
        worker
            .send(Message::Register {
                info: info("127.0.0.1", &["identity", "mandelbrot-row"]),
                lease_ms: 30_000,
            })
            .await
            .unwrap();
        let id2 = match recv_or_panic(&*worker).await {
            Message::RegisterAck { id, .. } => id,
            other => panic!("unexpected {other:?}"),
        };
        assert_ne!(id1, id2);

        match recv_or_panic(&*observer).await {
            Message::Notify { service } => {
                assert_eq!(service.service_id, id2);
                assert!(service.processors.contains("mandelbrot-row"));
            }
            other => panic!("unexpected {other:?}"),
        }

        // Fresh connection sees both in a query; filter narrows to one.
        let client = env.connect(&addr).await.unwrap();
        client
            .send(Message::Query {
                filter: String::new(),
            })
            .await
            .unwrap();
        match recv_or_panic(&*client).await {
            Message::QueryReply { services } => {
                let ids: BTreeSet<ServiceId> = services.iter().map(|s| s.service_id).collect();
                assert_eq!(ids, BTreeSet::from([id1, id2]));
            }
            other => panic!("unexpected {other:?}"),
        }

        // Unregister is fire-and-forget and takes effect promptly.
        worker.send(Message::Unregister { id: id2 }).await.unwrap();
        worker.send(Message::Ping).await.unwrap();
        assert_eq!(recv_or_panic(&*worker).await, Message::Pong);
        client
            .send(Message::Query {
                filter: String::new(),
            })
            .await
            .unwrap();
        match recv_or_panic(&*client).await {
            Message::QueryReply { services } => {
                assert_eq!(services.len(), 1);
                assert_eq!(services[0].service_id, id1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn rejected_register_gets_sentinel_ack() {
        let env: Arc<dyn Env> = TokioEnv::new();
        let bind = Endpoint {
            host: "127.0.0.1".into(),
            port: 0,
        };
        let addr = start_registry(env.clone(), &bind, RegistryConfig::default())
            .await
            .unwrap();
        let conn = env.connect(&addr).await.unwrap();
        conn.send(Message::Register {
            info: info("127.0.0.1", &["x"]),
            lease_ms: 10,
        })
        .await
        .unwrap();
        assert_eq!(
            recv_or_panic(&*conn).await,
            Message::RegisterAck {
                id: ServiceId(0),
                lease_expiry_ms: 0
            }
        );
    }
}

//! Task-farm runtime for stream-parallel computations on networked workers.
//!
//! The crate is organized around a small set of cooperating roles:
//!
//! * [`protocol`]: domain types and the length-prefixed binary wire protocol
//!   shared by every role.
//! * [`skeletons`]: the farm/pipe/seq skeleton algebra, its normal-form
//!   reduction and a sequential reference evaluator.
//! * [`registry`]: the lookup service holding leased service descriptors,
//!   answering queries and pushing arrival notifications.
//! * [`worker`]: the service daemon. It registers, waits to be recruited by
//!   one client, serves that client's tasks, then re-registers.
//! * [`client`]: the client runtime. It recruits services, runs one control
//!   thread per service against a shared task repository, reschedules tasks
//!   from failed services and returns results in input order.
//! * [`processors`]: the three-phase task processor contract plus the
//!   built-in processors.
//! * [`runtime`]: the environment abstraction (clock, network, spawner) the
//!   roles are written against, with a tokio/TCP implementation for
//!   production. A deterministic virtual-time implementation lives in the
//!   companion harness crate.

pub mod client;
pub mod processors;
pub mod protocol;
pub mod registry;
pub mod runtime;
pub mod skeletons;
pub mod testkit;
pub mod trace;
pub mod worker;

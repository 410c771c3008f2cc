//! Deterministic simulation harness for the task-farm runtime.
//!
//! The production components are written against the `Env` abstraction in
//! `taskfarm-core`, so the whole distributed system (registry, workers,
//! client) runs unmodified inside a single-threaded simulation with a
//! virtual clock, a scripted network, and seeded randomness. A scenario
//! fixes the topology, per-worker service times, arrival times, and fault
//! injections; running it yields the job's outputs plus an ordered trace
//! of every scheduling decision. Fixed seed, identical trace: bugs found
//! by randomized scenario sweeps replay exactly.
//!
//! Modules: [`sim`] is the executor, clock, and network; [`scenario`]
//! wires components into a run; [`trace`] is the event log and its
//! predicates; [`oracle`] holds independent models that runs are checked
//! against.

pub mod oracle;
pub mod scenario;
pub mod sim;
pub mod trace;

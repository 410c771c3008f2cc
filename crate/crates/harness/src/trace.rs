//! Ordered record of what happened during a simulation run.

use std::collections::BTreeMap;
use std::fmt;

use taskfarm_core::protocol::{ServiceId, TaskId};
use taskfarm_core::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub at_ms: u64,
    pub host: String,
    pub event: TraceEvent,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} [{}] {}", self.at_ms, self.host, self.event)
    }
}

/// The full event log of a run, ordered by virtual time. With a fixed seed
/// a scenario renders to the byte-identical trace every time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new(entries: Vec<TraceEntry>) -> Self {
        Trace { entries }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn count(&self, pred: impl Fn(&TraceEvent) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.event)).count()
    }

    pub fn first(&self, pred: impl Fn(&TraceEvent) -> bool) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| pred(&e.event))
    }

    pub fn last(&self, pred: impl Fn(&TraceEvent) -> bool) -> Option<&TraceEntry> {
        self.entries.iter().rev().find(|e| pred(&e.event))
    }

    /// Which host registered each service id. Registration events are
    /// emitted by the worker itself, so this maps services to worker hosts.
    pub fn service_hosts(&self) -> BTreeMap<ServiceId, String> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            if let TraceEvent::Registered { service } = &e.event {
                map.entry(*service).or_insert_with(|| e.host.clone());
            }
        }
        map
    }

    pub fn completed_counts_by_service(&self) -> BTreeMap<ServiceId, usize> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            if let TraceEvent::Completed { service, .. } = &e.event {
                *map.entry(*service).or_insert(0) += 1;
            }
        }
        map
    }

    /// Completed-task counts folded over to worker hosts, so scenarios can
    /// assert on load distribution even when a host re-registers under a
    /// fresh service id.
    pub fn completed_counts_by_host(&self) -> BTreeMap<String, usize> {
        let hosts = self.service_hosts();
        let mut map = BTreeMap::new();
        for e in &self.entries {
            if let TraceEvent::Completed { service, .. } = &e.event {
                if let Some(host) = hosts.get(service) {
                    *map.entry(host.clone()).or_insert(0) += 1;
                }
            }
        }
        map
    }

    /// Virtual time from the first assignment to the last completion.
    pub fn makespan_ms(&self) -> Option<u64> {
        let start = self
            .first(|e| matches!(e, TraceEvent::Assigned { .. }))?
            .at_ms;
        let end = self
            .last(|e| matches!(e, TraceEvent::Completed { .. }))?
            .at_ms;
        Some(end.saturating_sub(start))
    }

    /// Structural sanity checks that hold for every legal run: timestamps
    /// never go backwards, and each completion was preceded by a matching
    /// assignment of the same task to the same service.
    pub fn assert_well_formed(&self) {
        let mut prev = 0;
        for e in &self.entries {
            assert!(e.at_ms >= prev, "trace goes backwards in time at: {e}");
            prev = e.at_ms;
        }
        let mut assigned: BTreeMap<(TaskId, ServiceId), usize> = BTreeMap::new();
        for e in &self.entries {
            match &e.event {
                TraceEvent::Assigned { task, service } => {
                    *assigned.entry((*task, *service)).or_insert(0) += 1;
                }
                TraceEvent::Completed { task, service } => {
                    let n = assigned.get(&(*task, *service)).copied().unwrap_or(0);
                    assert!(n > 0, "completion without a prior matching assignment: {e}");
                }
                _ => {}
            }
        }
    }
}

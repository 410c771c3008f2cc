//! Independent prediction models that simulation results are checked
//! against. Both are deliberately written in the most boring way possible
//! (greedy loops, linear scans) so they share no structure with the code
//! under test.

use std::collections::BTreeSet;

use taskfarm_core::protocol::{Endpoint, ServiceInfo};

/// Outcome of the greedy self-scheduling model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelfScheduling {
    /// Tasks completed per worker, same order as the input service times.
    pub counts: Vec<usize>,
    /// Time at which the last worker finishes its last task.
    pub makespan_ms: u64,
}

/// Predicts how demand-driven scheduling spreads `tasks` over workers with
/// the given per-task service times. A worker's cycle is its service time
/// plus one network hop each way for the assignment and the result; a free
/// worker immediately pulls the next pending task. Ties go to the
/// lower-indexed worker. Startup effects (recruitment handshakes) are not
/// modeled, which is why comparisons carry a small tolerance.
pub fn self_scheduling(service_times_ms: &[u64], tasks: usize, latency_ms: u64) -> SelfScheduling {
    let workers = service_times_ms.len();
    let mut counts = vec![0usize; workers];
    let mut free_at = vec![0u64; workers];
    if workers == 0 {
        return SelfScheduling {
            counts,
            makespan_ms: 0,
        };
    }
    for _ in 0..tasks {
        let mut pick = 0;
        for j in 1..workers {
            if free_at[j] < free_at[pick] {
                pick = j;
            }
        }
        counts[pick] += 1;
        free_at[pick] += service_times_ms[pick] + 2 * latency_ms;
    }
    SelfScheduling {
        counts,
        makespan_ms: free_at.into_iter().max().unwrap_or(0),
    }
}

#[derive(Debug, Clone)]
struct NaiveRow {
    id: u128,
    endpoint: Endpoint,
    processors: BTreeSet<String>,
    expiry: u64,
}

/// Reference model of the registry's observable behavior: a flat Vec in
/// insertion order, linear scans everywhere, results sorted only when
/// returned. Ids start at 1 and advance only on successful registration;
/// an entry is dead once `now >= expiry`.
#[derive(Debug, Clone)]
pub struct NaiveRegistry {
    min_lease_ms: u64,
    max_lease_ms: u64,
    issued: u128,
    rows: Vec<NaiveRow>,
}

impl NaiveRegistry {
    pub fn new(min_lease_ms: u64, max_lease_ms: u64) -> Self {
        NaiveRegistry {
            min_lease_ms,
            max_lease_ms,
            issued: 0,
            rows: Vec::new(),
        }
    }

    /// `None` means the registration was rejected.
    pub fn register(&mut self, now: u64, info: &ServiceInfo, lease_ms: u64) -> Option<(u128, u64)> {
        if lease_ms < self.min_lease_ms || lease_ms > self.max_lease_ms {
            return None;
        }
        if info.processors.is_empty() || info.endpoint.host.is_empty() {
            return None;
        }
        self.issued += 1;
        let id = self.issued;
        let expiry = now + lease_ms;
        self.rows.push(NaiveRow {
            id,
            endpoint: info.endpoint.clone(),
            processors: info.processors.clone(),
            expiry,
        });
        Some((id, expiry))
    }

    pub fn unregister(&mut self, id: u128) {
        self.rows.retain(|r| r.id != id);
    }

    /// `None` means the renewal was rejected (bad lease, unknown id, or
    /// the old lease already ran out).
    pub fn renew(&mut self, now: u64, id: u128, lease_ms: u64) -> Option<u64> {
        if lease_ms < self.min_lease_ms || lease_ms > self.max_lease_ms {
            return None;
        }
        for row in &mut self.rows {
            if row.id == id {
                if row.expiry <= now {
                    return None;
                }
                row.expiry = now + lease_ms;
                return Some(row.expiry);
            }
        }
        None
    }

    /// Live matching entries as (id, endpoint, expiry), sorted by id.
    pub fn query(&self, now: u64, filter: &str) -> Vec<(u128, Endpoint, u64)> {
        let mut out = Vec::new();
        for row in &self.rows {
            let alive = row.expiry > now;
            let matches = filter.is_empty() || row.processors.iter().any(|p| p == filter);
            if alive && matches {
                out.push((row.id, row.endpoint.clone(), row.expiry));
            }
        }
        out.sort_by_key(|r| r.0);
        out
    }

    pub fn sweep(&mut self, now: u64) -> usize {
        let before = self.rows.len();
        self.rows.retain(|r| r.expiry > now);
        before - self.rows.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_workers_split_evenly() {
        let got = self_scheduling(&[10, 10, 10, 10], 100, 0);
        assert_eq!(got.counts, vec![25, 25, 25, 25]);
        assert_eq!(got.makespan_ms, 250);
    }

    #[test]
    fn fast_worker_takes_the_larger_share() {
        let got = self_scheduling(&[10, 30], 100, 1);
        let total: usize = got.counts.iter().sum();
        assert_eq!(total, 100);
        // Cycle times 12 vs 32 ms: the fast worker takes about 32/44 of
        // the stream.
        assert_eq!(got.counts[0], 73);
        assert_eq!(got.counts[1], 27);
    }

    #[test]
    fn single_worker_is_sequential() {
        let got = self_scheduling(&[20], 7, 1);
        assert_eq!(got.counts, vec![7]);
        assert_eq!(got.makespan_ms, 7 * 22);
    }

    #[test]
    fn naive_registry_round_trip() {
        let mut reg = NaiveRegistry::new(1_000, 3_600_000);
        let info = ServiceInfo {
            endpoint: Endpoint {
                host: "w".into(),
                port: 9,
            },
            processors: ["identity".to_string()].into_iter().collect(),
            attributes: Default::default(),
        };
        assert_eq!(reg.register(0, &info, 10), None);
        let (id, expiry) = reg.register(0, &info, 5_000).unwrap();
        assert_eq!((id, expiry), (1, 5_000));
        assert_eq!(reg.query(4_999, "identity").len(), 1);
        assert_eq!(reg.query(5_000, "identity").len(), 0);
        assert_eq!(reg.renew(5_000, id, 5_000), None);
        assert_eq!(reg.sweep(5_000), 1);
    }
}

//! Structured events emitted at scheduling decision points.
//!
//! Components report these through [`crate::runtime::Env::emit`]. Production
//! environments forward them to logging; the simulation harness collects
//! them into an ordered trace that tests assert on.

use std::fmt;

use crate::protocol::{ServiceId, TaskId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    /// Worker completed registration and holds a lease.
    Registered { service: ServiceId },
    /// Client recruited a worker for a job.
    Recruited { service: ServiceId },
    /// Task handed to a recruited worker.
    Assigned { task: TaskId, service: ServiceId },
    /// Result received for a task.
    Completed { task: TaskId, service: ServiceId },
    /// Worker deemed dead or its connection dropped.
    Failed { service: ServiceId },
    /// In-flight task put back at the head of the queue.
    Rescheduled { task: TaskId },
    /// Worker released at the end of a job.
    Released { service: ServiceId },
    /// Registry pushed a new matching worker to a subscriber.
    Notified { service: ServiceId },
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::Registered { service } => write!(f, "registered {service}"),
            TraceEvent::Recruited { service } => write!(f, "recruited {service}"),
            TraceEvent::Assigned { task, service } => {
                write!(f, "assigned task={} to {service}", task.0)
            }
            TraceEvent::Completed { task, service } => {
                write!(f, "completed task={} on {service}", task.0)
            }
            TraceEvent::Failed { service } => write!(f, "failed {service}"),
            TraceEvent::Rescheduled { task } => write!(f, "rescheduled task={}", task.0),
            TraceEvent::Released { service } => write!(f, "released {service}"),
            TraceEvent::Notified { service } => write!(f, "notified about {service}"),
        }
    }
}

//! Seeded generators for protocol values, shared by this crate's tests and
//! the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::protocol::{
    Endpoint, JobPlan, Message, ServiceDescriptor, ServiceId, ServiceInfo, Task, TaskId, TaskResult,
};

pub fn arbitrary_bytes(rng: &mut impl Rng, max_len: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen()).collect()
}

pub fn arbitrary_name(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(1..=12);
    (0..len)
        .map(|_| {
            let chars = b"abcdefghijklmnopqrstuvwxyz0123456789-_.";
            chars[rng.gen_range(0..chars.len())] as char
        })
        .collect()
}

pub fn arbitrary_endpoint(rng: &mut impl Rng) -> Endpoint {
    Endpoint::new(arbitrary_name(rng), rng.gen())
}

pub fn arbitrary_info(rng: &mut impl Rng) -> ServiceInfo {
    let processors: BTreeSet<String> = (0..rng.gen_range(1..=4))
        .map(|_| arbitrary_name(rng))
        .collect();
    let attributes: BTreeMap<String, String> = (0..rng.gen_range(0..=3))
        .map(|_| (arbitrary_name(rng), arbitrary_name(rng)))
        .collect();
    ServiceInfo {
        endpoint: arbitrary_endpoint(rng),
        processors,
        attributes,
    }
}

pub fn arbitrary_descriptor(rng: &mut impl Rng) -> ServiceDescriptor {
    let info = arbitrary_info(rng);
    ServiceDescriptor {
        service_id: ServiceId(rng.gen()),
        endpoint: info.endpoint,
        processors: info.processors,
        lease_expiry_ms: rng.gen(),
        attributes: info.attributes,
    }
}

pub fn arbitrary_job_plan(rng: &mut impl Rng) -> JobPlan {
    let stages: Vec<String> = (0..rng.gen_range(1..=5))
        .map(|_| arbitrary_name(rng))
        .collect();
    let config: BTreeMap<String, Vec<u8>> = (0..rng.gen_range(0..=3))
        .map(|_| (arbitrary_name(rng), arbitrary_bytes(rng, 32)))
        .collect();
    JobPlan { stages, config }
}

/// One random message, uniform over the closed variant set.
pub fn arbitrary_message(rng: &mut impl Rng) -> Message {
    match rng.gen_range(0..16) {
        0 => Message::Register {
            info: arbitrary_info(rng),
            lease_ms: rng.gen(),
        },
        1 => Message::RegisterAck {
            id: ServiceId(rng.gen()),
            lease_expiry_ms: rng.gen(),
        },
        2 => Message::Unregister {
            id: ServiceId(rng.gen()),
        },
        3 => Message::Query {
            filter: if rng.gen_bool(0.3) {
                String::new()
            } else {
                arbitrary_name(rng)
            },
        },
        4 => Message::QueryReply {
            services: (0..rng.gen_range(0..=4))
                .map(|_| arbitrary_descriptor(rng))
                .collect(),
        },
        5 => Message::Subscribe {
            filter: if rng.gen_bool(0.3) {
                String::new()
            } else {
                arbitrary_name(rng)
            },
        },
        6 => Message::Notify {
            service: arbitrary_descriptor(rng),
        },
        7 => Message::Renew {
            id: ServiceId(rng.gen()),
            lease_ms: rng.gen(),
        },
        8 => Message::RenewAck {
            lease_expiry_ms: rng.gen(),
        },
        9 => Message::Recruit {
            job: arbitrary_job_plan(rng),
            nonce: rng.gen(),
        },
        10 => Message::RecruitAck { accept: rng.gen() },
        11 => Message::AssignTask {
            task: Task {
                id: TaskId(rng.gen()),
                payload: arbitrary_bytes(rng, 256),
            },
        },
        12 => Message::TaskDone {
            result: TaskResult {
                id: TaskId(rng.gen()),
                payload: arbitrary_bytes(rng, 256),
                worker: ServiceId(rng.gen()),
            },
        },
        13 => Message::Release,
        14 => Message::Ping,
        _ => Message::Pong,
    }
}

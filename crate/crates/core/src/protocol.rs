//! Domain types and the wire protocol shared by registry, worker and client.
//!
//! # Wire format
//!
//! Every message travels as one self-delimiting frame on a stream transport:
//!
//! ```text
//! +--------------------+-----------+----------------------+
//! | length  (4 bytes)  | tag (1 B) | variant body         |
//! | big-endian u32     |           | (length - 1 bytes)   |
//! +--------------------+-----------+----------------------+
//! ```
//!
//! The length prefix counts the tag byte plus the body. The total frame
//! (prefix included) must not exceed the configured maximum, 16 MiB by
//! default. All integers are big-endian. Byte strings and UTF-8 strings are
//! encoded as a `u32` length followed by the raw bytes; lists as a `u32`
//! element count followed by the elements. Sets and maps are encoded in
//! ascending key order so that equal values encode to equal bytes.
//!
//! The full tag table and per-variant body layouts are documented in
//! `docs/protocol.md`; [`Message::tag`] and [`ALL_TAGS`] are the table's
//! source of truth in code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Default cap on the total frame size (prefix included): 16 MiB.
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

/// Registry-assigned identifier of a registered service.
///
/// Never reused within one registry process lifetime; the zero value is
/// reserved as the "rejected" sentinel in `RegisterAck` and never assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceId(pub u128);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}", self.0)
    }
}

/// Position of a task in the client's input collection. Dense: an input of
/// `n` tasks uses exactly the indices `0..n-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A `host:port` network address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid endpoint {0:?}: expected host:port")]
pub struct EndpointParseError(pub String);

impl FromStr for Endpoint {
    type Err = EndpointParseError;

    /// Splits at the last `:` so bare IPv6 addresses keep their colons.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| EndpointParseError(s.to_string()))?;
        if host.is_empty() {
            return Err(EndpointParseError(s.to_string()));
        }
        let port = port
            .parse::<u16>()
            .map_err(|_| EndpointParseError(s.to_string()))?;
        Ok(Endpoint::new(host, port))
    }
}

/// What a worker advertises when registering: everything in a
/// [`ServiceDescriptor`] except the registry-assigned id and lease.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceInfo {
    pub endpoint: Endpoint,
    pub processors: BTreeSet<String>,
    pub attributes: BTreeMap<String, String>,
}

/// A registered worker as held by the registry and returned from queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceDescriptor {
    pub service_id: ServiceId,
    pub endpoint: Endpoint,
    pub processors: BTreeSet<String>,
    /// Absolute expiry, milliseconds since the clock epoch.
    pub lease_expiry_ms: u64,
    pub attributes: BTreeMap<String, String>,
}

impl ServiceDescriptor {
    pub fn info(&self) -> ServiceInfo {
        ServiceInfo {
            endpoint: self.endpoint.clone(),
            processors: self.processors.clone(),
            attributes: self.attributes.clone(),
        }
    }
}

/// One unit of the input stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: TaskId,
    pub payload: Vec<u8>,
}

/// The computed output for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskResult {
    pub id: TaskId,
    pub payload: Vec<u8>,
    pub worker: ServiceId,
}

/// The executable form of a job as shipped to workers: the normal form's
/// stage names plus one opaque configuration blob per processor name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobPlan {
    pub stages: Vec<String>,
    pub config: BTreeMap<String, Vec<u8>>,
}

impl JobPlan {
    /// Configuration for a stage; missing entries mean empty config.
    pub fn config_for(&self, name: &str) -> &[u8] {
        self.config.get(name).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// The closed set of wire messages.
///
/// Registry plane: `Register` through `RenewAck`. Work plane: `Recruit`
/// through `Pong`. The registry has no dedicated error variant;
/// `RegisterAck { id: 0, .. }` and `RenewAck { lease_expiry_ms: 0 }` are the
/// rejection sentinels (a real id is never 0 and a real expiry is always in
/// the future).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Register { info: ServiceInfo, lease_ms: u64 },
    RegisterAck { id: ServiceId, lease_expiry_ms: u64 },
    Unregister { id: ServiceId },
    Query { filter: String },
    QueryReply { services: Vec<ServiceDescriptor> },
    Subscribe { filter: String },
    Notify { service: ServiceDescriptor },
    Renew { id: ServiceId, lease_ms: u64 },
    RenewAck { lease_expiry_ms: u64 },
    Recruit { job: JobPlan, nonce: u64 },
    RecruitAck { accept: bool },
    AssignTask { task: Task },
    TaskDone { result: TaskResult },
    Release,
    Ping,
    Pong,
}

pub const TAG_REGISTER: u8 = 0x01;
pub const TAG_REGISTER_ACK: u8 = 0x02;
pub const TAG_UNREGISTER: u8 = 0x03;
pub const TAG_QUERY: u8 = 0x04;
pub const TAG_QUERY_REPLY: u8 = 0x05;
pub const TAG_SUBSCRIBE: u8 = 0x06;
pub const TAG_NOTIFY: u8 = 0x07;
pub const TAG_RENEW: u8 = 0x08;
pub const TAG_RENEW_ACK: u8 = 0x09;
pub const TAG_RECRUIT: u8 = 0x10;
pub const TAG_RECRUIT_ACK: u8 = 0x11;
pub const TAG_ASSIGN_TASK: u8 = 0x12;
pub const TAG_TASK_DONE: u8 = 0x13;
pub const TAG_RELEASE: u8 = 0x14;
pub const TAG_PING: u8 = 0x15;
pub const TAG_PONG: u8 = 0x16;

/// Every assigned tag, in ascending order. Anything not in this table is an
/// unknown tag and decodes to [`FrameError::Malformed`].
pub const ALL_TAGS: [u8; 16] = [
    TAG_REGISTER,
    TAG_REGISTER_ACK,
    TAG_UNREGISTER,
    TAG_QUERY,
    TAG_QUERY_REPLY,
    TAG_SUBSCRIBE,
    TAG_NOTIFY,
    TAG_RENEW,
    TAG_RENEW_ACK,
    TAG_RECRUIT,
    TAG_RECRUIT_ACK,
    TAG_ASSIGN_TASK,
    TAG_TASK_DONE,
    TAG_RELEASE,
    TAG_PING,
    TAG_PONG,
];

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Register { .. } => TAG_REGISTER,
            Message::RegisterAck { .. } => TAG_REGISTER_ACK,
            Message::Unregister { .. } => TAG_UNREGISTER,
            Message::Query { .. } => TAG_QUERY,
            Message::QueryReply { .. } => TAG_QUERY_REPLY,
            Message::Subscribe { .. } => TAG_SUBSCRIBE,
            Message::Notify { .. } => TAG_NOTIFY,
            Message::Renew { .. } => TAG_RENEW,
            Message::RenewAck { .. } => TAG_RENEW_ACK,
            Message::Recruit { .. } => TAG_RECRUIT,
            Message::RecruitAck { .. } => TAG_RECRUIT_ACK,
            Message::AssignTask { .. } => TAG_ASSIGN_TASK,
            Message::TaskDone { .. } => TAG_TASK_DONE,
            Message::Release => TAG_RELEASE,
            Message::Ping => TAG_PING,
            Message::Pong => TAG_PONG,
        }
    }

    /// Short name for logs and traces.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "Register",
            Message::RegisterAck { .. } => "RegisterAck",
            Message::Unregister { .. } => "Unregister",
            Message::Query { .. } => "Query",
            Message::QueryReply { .. } => "QueryReply",
            Message::Subscribe { .. } => "Subscribe",
            Message::Notify { .. } => "Notify",
            Message::Renew { .. } => "Renew",
            Message::RenewAck { .. } => "RenewAck",
            Message::Recruit { .. } => "Recruit",
            Message::RecruitAck { .. } => "RecruitAck",
            Message::AssignTask { .. } => "AssignTask",
            Message::TaskDone { .. } => "TaskDone",
            Message::Release => "Release",
            Message::Ping => "Ping",
            Message::Pong => "Pong",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    Oversized { len: usize, max: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
}

/// Encodes `msg` into one frame under the default size limit.
pub fn encode(msg: &Message) -> Result<Vec<u8>, FrameError> {
    encode_with_limit(msg, DEFAULT_MAX_FRAME)
}

/// Encodes `msg` into one frame, rejecting frames whose total length
/// (prefix included) exceeds `max_frame`.
pub fn encode_with_limit(msg: &Message, max_frame: usize) -> Result<Vec<u8>, FrameError> {
    let mut body = Vec::new();
    body.push(msg.tag());
    write_body(msg, &mut body);
    let total = 4 + body.len();
    if total > max_frame {
        return Err(FrameError::Oversized {
            len: total,
            max: max_frame,
        });
    }
    let mut frame = Vec::with_capacity(total);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Tries to decode one frame from the front of `buf` under the default limit.
pub fn decode(buf: &[u8]) -> Result<Option<(Message, usize)>, FrameError> {
    decode_with_limit(buf, DEFAULT_MAX_FRAME)
}

/// Tries to decode one frame from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` does not yet hold a complete frame (not a
/// failure; read more bytes and retry). On success returns the message and
/// the number of bytes consumed; trailing bytes are untouched.
pub fn decode_with_limit(
    buf: &[u8],
    max_frame: usize,
) -> Result<Option<(Message, usize)>, FrameError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let body_len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if body_len == 0 {
        return Err(FrameError::Malformed("zero-length frame has no tag".into()));
    }
    let total = 4 + body_len;
    if total > max_frame {
        return Err(FrameError::Oversized {
            len: total,
            max: max_frame,
        });
    }
    if buf.len() < total {
        return Ok(None);
    }
    let mut r = Reader::new(&buf[4..total]);
    let tag = r.u8()?;
    let msg = read_body(tag, &mut r)?;
    if !r.is_empty() {
        return Err(FrameError::Malformed(format!(
            "{} trailing bytes after {} body",
            r.remaining(),
            msg.kind()
        )));
    }
    Ok(Some((msg, total)))
}

fn write_body(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::Register { info, lease_ms } => {
            write_info(info, out);
            out.extend_from_slice(&lease_ms.to_be_bytes());
        }
        Message::RegisterAck {
            id,
            lease_expiry_ms,
        } => {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(&lease_expiry_ms.to_be_bytes());
        }
        Message::Unregister { id } => out.extend_from_slice(&id.0.to_be_bytes()),
        Message::Query { filter } => write_str(filter, out),
        Message::QueryReply { services } => {
            out.extend_from_slice(&(services.len() as u32).to_be_bytes());
            for d in services {
                write_descriptor(d, out);
            }
        }
        Message::Subscribe { filter } => write_str(filter, out),
        Message::Notify { service } => write_descriptor(service, out),
        Message::Renew { id, lease_ms } => {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(&lease_ms.to_be_bytes());
        }
        Message::RenewAck { lease_expiry_ms } => {
            out.extend_from_slice(&lease_expiry_ms.to_be_bytes())
        }
        Message::Recruit { job, nonce } => {
            out.extend_from_slice(&(job.stages.len() as u32).to_be_bytes());
            for s in &job.stages {
                write_str(s, out);
            }
            out.extend_from_slice(&(job.config.len() as u32).to_be_bytes());
            for (k, v) in &job.config {
                write_str(k, out);
                write_bytes(v, out);
            }
            out.extend_from_slice(&nonce.to_be_bytes());
        }
        Message::RecruitAck { accept } => out.push(u8::from(*accept)),
        Message::AssignTask { task } => {
            out.extend_from_slice(&task.id.0.to_be_bytes());
            write_bytes(&task.payload, out);
        }
        Message::TaskDone { result } => {
            out.extend_from_slice(&result.id.0.to_be_bytes());
            write_bytes(&result.payload, out);
            out.extend_from_slice(&result.worker.0.to_be_bytes());
        }
        Message::Release | Message::Ping | Message::Pong => {}
    }
}

fn read_body(tag: u8, r: &mut Reader<'_>) -> Result<Message, FrameError> {
    let msg = match tag {
        TAG_REGISTER => Message::Register {
            info: read_info(r)?,
            lease_ms: r.u64()?,
        },
        TAG_REGISTER_ACK => Message::RegisterAck {
            id: ServiceId(r.u128()?),
            lease_expiry_ms: r.u64()?,
        },
        TAG_UNREGISTER => Message::Unregister {
            id: ServiceId(r.u128()?),
        },
        TAG_QUERY => Message::Query {
            filter: r.string()?,
        },
        TAG_QUERY_REPLY => {
            let n = r.u32()?;
            let mut services = Vec::new();
            for _ in 0..n {
                services.push(read_descriptor(r)?);
            }
            Message::QueryReply { services }
        }
        TAG_SUBSCRIBE => Message::Subscribe {
            filter: r.string()?,
        },
        TAG_NOTIFY => Message::Notify {
            service: read_descriptor(r)?,
        },
        TAG_RENEW => Message::Renew {
            id: ServiceId(r.u128()?),
            lease_ms: r.u64()?,
        },
        TAG_RENEW_ACK => Message::RenewAck {
            lease_expiry_ms: r.u64()?,
        },
        TAG_RECRUIT => {
            let n = r.u32()?;
            let mut stages = Vec::new();
            for _ in 0..n {
                stages.push(r.string()?);
            }
            let m = r.u32()?;
            let mut config = BTreeMap::new();
            for _ in 0..m {
                let k = r.string()?;
                let v = r.bytes()?;
                config.insert(k, v);
            }
            Message::Recruit {
                job: JobPlan { stages, config },
                nonce: r.u64()?,
            }
        }
        TAG_RECRUIT_ACK => Message::RecruitAck { accept: r.bool()? },
        TAG_ASSIGN_TASK => Message::AssignTask {
            task: Task {
                id: TaskId(r.u64()?),
                payload: r.bytes()?,
            },
        },
        TAG_TASK_DONE => Message::TaskDone {
            result: TaskResult {
                id: TaskId(r.u64()?),
                payload: r.bytes()?,
                worker: ServiceId(r.u128()?),
            },
        },
        TAG_RELEASE => Message::Release,
        TAG_PING => Message::Ping,
        TAG_PONG => Message::Pong,
        other => return Err(FrameError::Malformed(format!("unknown tag {other:#04x}"))),
    };
    Ok(msg)
}

fn write_str(s: &str, out: &mut Vec<u8>) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_bytes(b: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn write_info(info: &ServiceInfo, out: &mut Vec<u8>) {
    write_str(&info.endpoint.host, out);
    out.extend_from_slice(&info.endpoint.port.to_be_bytes());
    out.extend_from_slice(&(info.processors.len() as u32).to_be_bytes());
    for p in &info.processors {
        write_str(p, out);
    }
    out.extend_from_slice(&(info.attributes.len() as u32).to_be_bytes());
    for (k, v) in &info.attributes {
        write_str(k, out);
        write_str(v, out);
    }
}

fn write_descriptor(d: &ServiceDescriptor, out: &mut Vec<u8>) {
    out.extend_from_slice(&d.service_id.0.to_be_bytes());
    write_str(&d.endpoint.host, out);
    out.extend_from_slice(&d.endpoint.port.to_be_bytes());
    out.extend_from_slice(&(d.processors.len() as u32).to_be_bytes());
    for p in &d.processors {
        write_str(p, out);
    }
    out.extend_from_slice(&d.lease_expiry_ms.to_be_bytes());
    out.extend_from_slice(&(d.attributes.len() as u32).to_be_bytes());
    for (k, v) in &d.attributes {
        write_str(k, out);
        write_str(v, out);
    }
}

fn read_info(r: &mut Reader<'_>) -> Result<ServiceInfo, FrameError> {
    let host = r.string()?;
    let port = r.u16()?;
    let n = r.u32()?;
    let mut processors = BTreeSet::new();
    for _ in 0..n {
        processors.insert(r.string()?);
    }
    let m = r.u32()?;
    let mut attributes = BTreeMap::new();
    for _ in 0..m {
        let k = r.string()?;
        let v = r.string()?;
        attributes.insert(k, v);
    }
    Ok(ServiceInfo {
        endpoint: Endpoint::new(host, port),
        processors,
        attributes,
    })
}

fn read_descriptor(r: &mut Reader<'_>) -> Result<ServiceDescriptor, FrameError> {
    let service_id = ServiceId(r.u128()?);
    let host = r.string()?;
    let port = r.u16()?;
    let n = r.u32()?;
    let mut processors = BTreeSet::new();
    for _ in 0..n {
        processors.insert(r.string()?);
    }
    let lease_expiry_ms = r.u64()?;
    let m = r.u32()?;
    let mut attributes = BTreeMap::new();
    for _ in 0..m {
        let k = r.string()?;
        let v = r.string()?;
        attributes.insert(k, v);
    }
    Ok(ServiceDescriptor {
        service_id,
        endpoint: Endpoint::new(host, port),
        processors,
        lease_expiry_ms,
        attributes,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.remaining() < n {
            return Err(FrameError::Malformed(format!(
                "body truncated: wanted {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, FrameError> {
        Ok(u128::from_be_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn bool(&mut self) -> Result<bool, FrameError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(FrameError::Malformed(format!("invalid bool byte {b:#04x}"))),
        }
    }

    fn bytes(&mut self) -> Result<Vec<u8>, FrameError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn string(&mut self) -> Result<String, FrameError> {
        let raw = self.bytes()?;
        String::from_utf8(raw)
            .map_err(|_| FrameError::Malformed("string is not valid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::arbitrary_message;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn ping_is_five_bytes() {
        let frame = encode(&Message::Ping).unwrap();
        assert_eq!(frame, vec![0, 0, 0, 1, TAG_PING]);
        let (msg, used) = decode(&frame).unwrap().unwrap();
        assert_eq!(msg, Message::Ping);
        assert_eq!(used, 5);
    }

    #[test]
    fn unregister_zero_id_body_is_tag_plus_sixteen_zeros() {
        let frame = encode(&Message::Unregister { id: ServiceId(0) }).unwrap();
        assert_eq!(frame.len(), 4 + 17);
        assert_eq!(&frame[..4], &17u32.to_be_bytes());
        assert_eq!(frame[4], TAG_UNREGISTER);
        assert!(frame[5..].iter().all(|&b| b == 0));
    }

    #[test]
    fn assign_task_round_trips() {
        let msg = Message::AssignTask {
            task: Task {
                id: TaskId(7),
                payload: b"abc".to_vec(),
            },
        };
        let frame = encode(&msg).unwrap();
        let (back, used) = decode(&frame).unwrap().unwrap();
        assert_eq!(back, msg);
        assert_eq!(used, frame.len());
    }

    #[test]
    fn pong_decodes_as_inverse_of_encode() {
        let frame = encode(&Message::Pong).unwrap();
        assert_eq!(decode(&frame).unwrap(), Some((Message::Pong, 5)));
    }

    #[test]
    fn short_prefix_is_incomplete() {
        let frame = encode(&Message::Query { filter: "f".into() }).unwrap();
        assert_eq!(decode(&frame[..3]).unwrap(), None);
        // Complete prefix but truncated body is also just incomplete.
        assert_eq!(decode(&frame[..frame.len() - 1]).unwrap(), None);
    }

    #[test]
    fn unknown_tag_is_malformed() {
        assert!(!ALL_TAGS.contains(&0xFF));
        let frame = [0u8, 0, 0, 1, 0xFF];
        assert!(matches!(decode(&frame), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn every_unassigned_tag_is_rejected_and_assigned_tags_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for t in ALL_TAGS {
            assert!(seen.insert(t), "tag {t:#04x} assigned twice");
        }
        for tag in 0u8..=255 {
            if ALL_TAGS.contains(&tag) {
                continue;
            }
            let frame = [0u8, 0, 0, 1, tag];
            match decode(&frame) {
                Err(FrameError::Malformed(_)) => {}
                // Tags with non-empty bodies fail as truncated, also malformed.
                other => panic!("tag {tag:#04x} accepted: {other:?}"),
            }
        }
    }

    #[test]
    fn zero_length_frame_is_malformed() {
        assert!(matches!(
            decode(&[0, 0, 0, 0]),
            Err(FrameError::Malformed(_))
        ));
    }

    #[test]
    fn trailing_body_bytes_are_malformed() {
        let mut frame = encode(&Message::Ping).unwrap();
        frame[3] = 2; // claim one extra body byte
        frame.push(0);
        assert!(matches!(decode(&frame), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn oversized_frames_are_rejected_both_ways() {
        let msg = Message::AssignTask {
            task: Task {
                id: TaskId(0),
                payload: vec![0u8; 64],
            },
        };
        assert!(matches!(
            encode_with_limit(&msg, 32),
            Err(FrameError::Oversized { .. })
        ));
        let frame = encode(&msg).unwrap();
        assert!(matches!(
            decode_with_limit(&frame, 32),
            Err(FrameError::Oversized { .. })
        ));
    }

    #[test]
    fn concatenated_frames_decode_in_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let msgs: Vec<Message> = (0..16).map(|_| arbitrary_message(&mut rng)).collect();
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend_from_slice(&encode(m).unwrap());
        }
        let mut decoded = Vec::new();
        let mut off = 0;
        while off < stream.len() {
            let (m, used) = decode(&stream[off..]).unwrap().unwrap();
            decoded.push(m);
            off += used;
        }
        assert_eq!(decoded, msgs);
    }

    #[test]
    fn randomized_messages_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(0xFA51);
        for _ in 0..2000 {
            let msg = arbitrary_message(&mut rng);
            let frame = encode(&msg).unwrap();
            let (back, used) = decode(&frame).unwrap().unwrap();
            assert_eq!(back, msg);
            assert_eq!(used, frame.len());
        }
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("a:1".parse::<Endpoint>().unwrap(), Endpoint::new("a", 1));
        assert_eq!(
            "::1:80".parse::<Endpoint>().unwrap(),
            Endpoint::new("::1", 80)
        );
        assert!("noport".parse::<Endpoint>().is_err());
        assert!(":1".parse::<Endpoint>().is_err());
        assert!("h:notaport".parse::<Endpoint>().is_err());
        assert_eq!(Endpoint::new("h", 9).to_string(), "h:9");
    }
}

//! The per-task compute units workers host, plus the built-in set.
//!
//! A processor handles one task at a time through the three-phase lifecycle
//! `set_data(input)`, `run()`, `get_data() -> output` and is then reusable
//! for the next task. Failures are panics; the hosting environment catches
//! them and the worker abandons the client connection, which funnels the
//! task into the client's ordinary rescheduling path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::JobPlan;

pub trait Processor: Send {
    fn set_data(&mut self, input: Vec<u8>);
    fn run(&mut self);
    fn get_data(&mut self) -> Vec<u8>;
}

#[derive(Debug, Error, PartialEq)]
pub enum ProcessorError {
    #[error("processor {0:?} is not available")]
    Unknown(String),
    #[error("invalid config for {name}: {reason}")]
    BadConfig { name: String, reason: String },
    #[error("processor panicked")]
    Panicked,
}

pub type ProcessorFactory =
    Arc<dyn Fn(&[u8]) -> Result<Box<dyn Processor>, ProcessorError> + Send + Sync>;

/// Name to factory table; a worker advertises its table's names.
#[derive(Clone, Default)]
pub struct ProcessorTable {
    factories: BTreeMap<String, ProcessorFactory>,
}

impl ProcessorTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// All built-in processors.
    pub fn builtin() -> Self {
        let mut t = Self::new();
        t.register("identity", |_cfg| Ok(Box::new(Identity::default()) as _));
        t.register("reverse", |_cfg| Ok(Box::new(Reverse::default()) as _));
        t.register("append", |cfg| {
            Ok(Box::new(Append {
                suffix: cfg.to_vec(),
                data: Vec::new(),
            }) as _)
        });
        t.register("delay", |cfg| {
            let ms = parse_u64_config(cfg).map_err(|reason| ProcessorError::BadConfig {
                name: "delay".into(),
                reason,
            })?;
            Ok(Box::new(Delay {
                ms,
                data: Vec::new(),
            }) as _)
        });
        t.register("mandelbrot-row", |_cfg| {
            Ok(Box::new(MandelbrotRow::default()) as _)
        });
        t.register("hash-search", |cfg| {
            let prefix = std::str::from_utf8(cfg)
                .ok()
                .map(str::trim)
                .filter(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_hexdigit()))
                .map(str::to_ascii_lowercase)
                .ok_or_else(|| ProcessorError::BadConfig {
                    name: "hash-search".into(),
                    reason: "config must be a non-empty hex digest prefix".into(),
                })?;
            Ok(Box::new(HashSearch {
                prefix,
                data: Vec::new(),
            }) as _)
        });
        t
    }

    /// Subset of the built-ins by name; unknown names are an error.
    pub fn builtin_subset<'a>(
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, ProcessorError> {
        let all = Self::builtin();
        let mut t = Self::new();
        for name in names {
            let f = all
                .factories
                .get(name)
                .ok_or_else(|| ProcessorError::Unknown(name.to_string()))?;
            t.factories.insert(name.to_string(), f.clone());
        }
        Ok(t)
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&[u8]) -> Result<Box<dyn Processor>, ProcessorError> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Arc::new(factory));
    }

    pub fn supports(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.factories.is_empty()
    }

    pub fn instantiate(
        &self,
        name: &str,
        config: &[u8],
    ) -> Result<Box<dyn Processor>, ProcessorError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| ProcessorError::Unknown(name.to_string()))?;
        f(config)
    }

    /// One instance per stage of a job plan, in stage order.
    pub fn instantiate_plan(
        &self,
        plan: &JobPlan,
    ) -> Result<Vec<Box<dyn Processor>>, ProcessorError> {
        plan.stages
            .iter()
            .map(|s| self.instantiate(s, plan.config_for(s)))
            .collect()
    }
}

fn parse_u64_config(cfg: &[u8]) -> Result<u64, String> {
    std::str::from_utf8(cfg)
        .map_err(|_| "not utf-8".to_string())?
        .trim()
        .parse()
        .map_err(|e| format!("not a number: {e}"))
}

#[derive(Default)]
struct Identity {
    data: Vec<u8>,
}

impl Processor for Identity {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }
    fn run(&mut self) {}
    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

#[derive(Default)]
struct Reverse {
    data: Vec<u8>,
}

impl Processor for Reverse {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }
    fn run(&mut self) {
        self.data.reverse();
    }
    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

struct Append {
    suffix: Vec<u8>,
    data: Vec<u8>,
}

impl Processor for Append {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }
    fn run(&mut self) {
        self.data.extend_from_slice(&self.suffix);
    }
    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

/// Echoes its payload after a real sleep; exists to give load-balance and
/// liveness tests a processor with a controllable service time.
struct Delay {
    ms: u64,
    data: Vec<u8>,
}

impl Processor for Delay {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }
    fn run(&mut self) {
        std::thread::sleep(std::time::Duration::from_millis(self.ms));
    }
    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

/// Escape-time iteration count for one point, capped at `maxiter`.
///
/// The escape test runs before each step, so the count is the number of
/// completed iterations with |z|^2 still at most 4.
pub fn mandelbrot_point(cr: f64, ci: f64, maxiter: u32) -> u32 {
    let mut zr = 0.0f64;
    let mut zi = 0.0f64;
    let mut k = 0;
    while k < maxiter {
        let zr2 = zr * zr;
        let zi2 = zi * zi;
        if zr2 + zi2 > 4.0 {
            break;
        }
        zi = 2.0 * zr * zi + ci;
        zr = zr2 - zi2 + cr;
        k += 1;
    }
    k
}

/// One row of counts: the k-th sample is at x0 + k*(x1-x0)/n.
pub fn mandelbrot_row(x0: f64, x1: f64, y: f64, n: u32, maxiter: u32) -> Vec<u32> {
    (0..n)
        .map(|k| mandelbrot_point(x0 + f64::from(k) * (x1 - x0) / f64::from(n), y, maxiter))
        .collect()
}

/// Payload: ASCII `x0 x1 y n maxiter`. Output: n iteration counts, each a
/// 4-byte big-endian integer.
#[derive(Default)]
struct MandelbrotRow {
    data: Vec<u8>,
}

impl Processor for MandelbrotRow {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }

    fn run(&mut self) {
        let text = std::str::from_utf8(&self.data).expect("mandelbrot-row payload not utf-8");
        let fields: Vec<&str> = text.split_whitespace().collect();
        let [x0, x1, y, n, maxiter] = fields[..] else {
            panic!("mandelbrot-row payload must be `x0 x1 y n maxiter`, got {text:?}");
        };
        let x0: f64 = x0.parse().expect("bad x0");
        let x1: f64 = x1.parse().expect("bad x1");
        let y: f64 = y.parse().expect("bad y");
        let n: u32 = n.parse().expect("bad n");
        let maxiter: u32 = maxiter.parse().expect("bad maxiter");
        let mut out = Vec::with_capacity(n as usize * 4);
        for c in mandelbrot_row(x0, x1, y, n, maxiter) {
            out.extend_from_slice(&c.to_be_bytes());
        }
        self.data = out;
    }

    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

/// Config: lowercase hex digest prefix. Payload: ASCII `start end` (end
/// exclusive). Output: every candidate in the range whose decimal string's
/// SHA-256 hex digest starts with the prefix, one per line.
struct HashSearch {
    prefix: String,
    data: Vec<u8>,
}

impl Processor for HashSearch {
    fn set_data(&mut self, input: Vec<u8>) {
        self.data = input;
    }

    fn run(&mut self) {
        let text = std::str::from_utf8(&self.data).expect("hash-search payload not utf-8");
        let fields: Vec<&str> = text.split_whitespace().collect();
        let [start, end] = fields[..] else {
            panic!("hash-search payload must be `start end`, got {text:?}");
        };
        let start: u64 = start.parse().expect("bad start");
        let end: u64 = end.parse().expect("bad end");
        let mut out = String::new();
        for cand in start..end {
            let text = cand.to_string();
            let digest = Sha256::digest(text.as_bytes());
            let mut hex = String::with_capacity(64);
            for b in digest {
                write!(hex, "{b:02x}").unwrap();
            }
            if hex.starts_with(&self.prefix) {
                out.push_str(&text);
                out.push('\n');
            }
        }
        self.data = out.into_bytes();
    }

    fn get_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }
}

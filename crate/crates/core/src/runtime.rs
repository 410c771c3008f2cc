//! Clock, network, spawn, and compute abstractions.
//!
//! Registry, worker, and client logic is written against [`Env`] so the same
//! code runs over real TCP (see [`TokioEnv`]) and inside the deterministic
//! simulator in the harness crate. Component code must use only these
//! methods for time, I/O, randomness, and task spawning; reaching for the
//! ambient runtime directly would break simulation determinism.

use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::pin::Pin;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use bytes::{Buf, BytesMut};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};

use crate::processors::{Processor, ProcessorError};
use crate::protocol::{decode_with_limit, encode_with_limit, Endpoint, FrameError, Message};
use crate::trace::TraceEvent;

pub type BoxFuture = Pin<Box<dyn Future<Output = ()> + Send + 'static>>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("connection to {0} refused")]
    Refused(Endpoint),
    #[error("connection closed")]
    Closed,
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("network error: {0}")]
    Io(String),
}

/// One message-oriented duplex connection.
///
/// `recv` is cancel-safe: dropping its future never loses buffered bytes,
/// so it can race a timeout in a select loop. `send` is not raced anywhere
/// and need not be.
#[async_trait]
pub trait Conn: Send + Sync {
    async fn send(&self, msg: Message) -> Result<(), NetError>;
    async fn recv(&self) -> Result<Message, NetError>;
    fn peer(&self) -> Endpoint;
}

#[async_trait]
pub trait Listener: Send + Sync {
    async fn accept(&self) -> Result<Box<dyn Conn>, NetError>;
    /// The actually bound endpoint (resolves port 0 to the assigned port).
    fn local(&self) -> Endpoint;
}

/// The runtime a component lives in.
#[async_trait]
pub trait Env: Send + Sync + 'static {
    /// Monotonic milliseconds since an arbitrary epoch.
    fn now_ms(&self) -> u64;
    async fn sleep_ms(&self, ms: u64);
    async fn connect(&self, to: &Endpoint) -> Result<Box<dyn Conn>, NetError>;
    async fn listen(&self, bind: &Endpoint) -> Result<Box<dyn Listener>, NetError>;
    fn spawn(&self, fut: BoxFuture);
    /// Runs one full processor lifecycle (`set_data`, `run`, `get_data`)
    /// off the async reactor, catching panics. On panic the instance is
    /// gone, which is fine: the worker abandons the connection anyway.
    async fn run_processor(
        &self,
        processor: Box<dyn Processor>,
        input: Vec<u8>,
    ) -> Result<(Box<dyn Processor>, Vec<u8>), ProcessorError>;
    fn rand_u64(&self) -> u64;
    /// Reports a scheduling decision point; collected by the harness,
    /// logged in production.
    fn emit(&self, event: TraceEvent);
}

/// Runs `fut` for at most `ms` virtual milliseconds; `None` on timeout.
pub async fn with_timeout<T>(env: &dyn Env, ms: u64, fut: impl Future<Output = T>) -> Option<T> {
    use futures::future::{select, Either};
    futures::pin_mut!(fut);
    let sleep = env.sleep_ms(ms);
    futures::pin_mut!(sleep);
    match select(fut, sleep).await {
        Either::Left((v, _)) => Some(v),
        Either::Right(((), _)) => None,
    }
}

/// Production environment: real TCP, tokio timers, OS randomness.
pub struct TokioEnv {
    epoch: Instant,
    max_frame: usize,
}

impl TokioEnv {
    pub fn new() -> Arc<Self> {
        Arc::new(TokioEnv {
            epoch: Instant::now(),
            max_frame: crate::protocol::DEFAULT_MAX_FRAME,
        })
    }
}

#[async_trait]
impl Env for TokioEnv {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    async fn sleep_ms(&self, ms: u64) {
        tokio::time::sleep(Duration::from_millis(ms)).await;
    }

    async fn connect(&self, to: &Endpoint) -> Result<Box<dyn Conn>, NetError> {
        let stream = TcpStream::connect((to.host.as_str(), to.port))
            .await
            .map_err(|_| NetError::Refused(to.clone()))?;
        Ok(Box::new(TcpConn::new(stream, to.clone(), self.max_frame)))
    }

    async fn listen(&self, bind: &Endpoint) -> Result<Box<dyn Listener>, NetError> {
        let listener = TcpListener::bind((bind.host.as_str(), bind.port))
            .await
            .map_err(|e| NetError::Io(format!("bind {bind}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| NetError::Io(e.to_string()))?;
        Ok(Box::new(TcpListenerWrap {
            listener,
            local: Endpoint {
                host: local.ip().to_string(),
                port: local.port(),
            },
            max_frame: self.max_frame,
        }))
    }

    fn spawn(&self, fut: BoxFuture) {
        tokio::spawn(fut);
    }

    async fn run_processor(
        &self,
        mut processor: Box<dyn Processor>,
        input: Vec<u8>,
    ) -> Result<(Box<dyn Processor>, Vec<u8>), ProcessorError> {
        let joined = tokio::task::spawn_blocking(move || {
            std::panic::catch_unwind(AssertUnwindSafe(move || {
                processor.set_data(input);
                processor.run();
                let out = processor.get_data();
                (processor, out)
            }))
        })
        .await;
        match joined {
            Ok(Ok(pair)) => Ok(pair),
            _ => Err(ProcessorError::Panicked),
        }
    }

    fn rand_u64(&self) -> u64 {
        rand::random()
    }

    fn emit(&self, event: TraceEvent) {
        tracing::debug!(target: "taskfarm", "{event}");
    }
}

struct TcpConn {
    peer: Endpoint,
    read: tokio::sync::Mutex<(OwnedReadHalf, BytesMut)>,
    write: tokio::sync::Mutex<OwnedWriteHalf>,
    max_frame: usize,
}

impl TcpConn {
    fn new(stream: TcpStream, peer: Endpoint, max_frame: usize) -> Self {
        let _ = stream.set_nodelay(true);
        let (r, w) = stream.into_split();
        TcpConn {
            peer,
            read: tokio::sync::Mutex::new((r, BytesMut::with_capacity(4096))),
            write: tokio::sync::Mutex::new(w),
            max_frame,
        }
    }
}

#[async_trait]
impl Conn for TcpConn {
    async fn send(&self, msg: Message) -> Result<(), NetError> {
        let bytes = encode_with_limit(&msg, self.max_frame)?;
        let mut w = self.write.lock().await;
        w.write_all(&bytes).await.map_err(|_| NetError::Closed)?;
        w.flush().await.map_err(|_| NetError::Closed)?;
        Ok(())
    }

    async fn recv(&self) -> Result<Message, NetError> {
        let mut guard = self.read.lock().await;
        let (stream, buf) = &mut *guard;
        loop {
            if let Some((msg, used)) = decode_with_limit(buf, self.max_frame)? {
                buf.advance(used);
                return Ok(msg);
            }
            // read_buf is cancel-safe; unconsumed frames stay in `buf`
            // behind the mutex, so a raced timeout drops nothing.
            let n = tokio::io::AsyncReadExt::read_buf(stream, buf)
                .await
                .map_err(|e| NetError::Io(e.to_string()))?;
            if n == 0 {
                return Err(NetError::Closed);
            }
        }
    }

    fn peer(&self) -> Endpoint {
        self.peer.clone()
    }
}

struct TcpListenerWrap {
    listener: TcpListener,
    local: Endpoint,
    max_frame: usize,
}

#[async_trait]
impl Listener for TcpListenerWrap {
    async fn accept(&self) -> Result<Box<dyn Conn>, NetError> {
        let (stream, addr) = self
            .listener
            .accept()
            .await
            .map_err(|e| NetError::Io(e.to_string()))?;
        let peer = Endpoint {
            host: addr.ip().to_string(),
            port: addr.port(),
        };
        Ok(Box::new(TcpConn::new(stream, peer, self.max_frame)))
    }

    fn local(&self) -> Endpoint {
        self.local.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ServiceId, TaskId};

    fn loopback() -> Endpoint {
        Endpoint {
            host: "127.0.0.1".into(),
            port: 0,
        }
    }

    #[tokio::test]
    async fn tcp_round_trip_and_coalesced_frames() {
        let env = TokioEnv::new();
        let listener = env.listen(&loopback()).await.unwrap();
        let addr = listener.local();
        assert_ne!(addr.port, 0);

        let server = tokio::spawn(async move {
            let conn = listener.accept().await.unwrap();
            // Both messages may arrive in one TCP segment.
            let a = conn.recv().await.unwrap();
            let b = conn.recv().await.unwrap();
            conn.send(Message::Pong).await.unwrap();
            (a, b)
        });

        let conn = env.connect(&addr).await.unwrap();
        conn.send(Message::Ping).await.unwrap();
        conn.send(Message::AssignTask {
            task: crate::protocol::Task {
                id: TaskId(9),
                payload: b"xyz".to_vec(),
            },
        })
        .await
        .unwrap();
        assert_eq!(conn.recv().await.unwrap(), Message::Pong);

        let (a, b) = server.await.unwrap();
        assert_eq!(a, Message::Ping);
        match b {
            Message::AssignTask { task } => assert_eq!(task.payload, b"xyz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn recv_reports_closed_on_peer_drop() {
        let env = TokioEnv::new();
        let listener = env.listen(&loopback()).await.unwrap();
        let addr = listener.local();
        let client = env.connect(&addr).await.unwrap();
        let served = listener.accept().await.unwrap();
        drop(served);
        match client.recv().await {
            Err(NetError::Closed) | Err(NetError::Io(_)) => {}
            other => panic!("expected closed, got {other:?}"),
        }
    }

    #[tokio::test]
    async fn with_timeout_fires() {
        let env = TokioEnv::new();
        let hit = with_timeout(&*env, 5_000, async { 42u8 }).await;
        assert_eq!(hit, Some(42));
        let missed = with_timeout(&*env, 10, std::future::pending::<u8>()).await;
        assert_eq!(missed, None);
    }

    #[tokio::test]
    async fn run_processor_catches_panic() {
        struct Bomb;
        impl Processor for Bomb {
            fn set_data(&mut self, _input: Vec<u8>) {}
            fn run(&mut self) {
                panic!("boom");
            }
            fn get_data(&mut self) -> Vec<u8> {
                Vec::new()
            }
        }
        let env = TokioEnv::new();
        let res = env.run_processor(Box::new(Bomb), b"x".to_vec()).await;
        assert!(matches!(res, Err(ProcessorError::Panicked)));
    }

    #[tokio::test]
    async fn connect_to_dead_port_is_refused() {
        let env = TokioEnv::new();
        // Bind then drop to obtain a port that is very likely closed.
        let probe = env.listen(&loopback()).await.unwrap();
        let addr = probe.local();
        drop(probe);
        let res = env.connect(&addr).await;
        assert!(matches!(res, Err(NetError::Refused(_))));
    }

    #[test]
    fn trace_event_wiring_compiles() {
        // emit is fire-and-forget; just exercise the call path.
        let env = TokioEnv::new();
        env.emit(TraceEvent::Failed {
            service: ServiceId(1),
        });
    }
}

//! Active-message wire frame and dispatch.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    handler key
//! bytes 8..16   payload length
//! bytes 16..    payload
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Sender};
use thiserror::Error;

use crate::registry::{HandlerKey, Registry, RegistryError};
use crate::transport::NodeId;

pub const HEADER_LEN: usize = 16;

/// Default upper bound for a frame's payload.
pub const DEFAULT_MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated message: {available} bytes, need {needed}")]
    TruncatedMessage { available: usize, needed: u64 },
    #[error("{extra} trailing bytes after declared payload")]
    TrailingGarbage { extra: usize },
    #[error("payload of {len} bytes exceeds limit of {max}")]
    FrameTooLarge { len: u64, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub handler_key: HandlerKey,
    pub payload_len: u64,
}

impl MessageHeader {
    pub fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.handler_key.0.to_le_bytes());
        out[8..].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_LEN]) -> Self {
        let (key, len) = bytes.split_at(8);
        MessageHeader {
            handler_key: HandlerKey(u64::from_le_bytes(key.try_into().unwrap())),
            payload_len: u64::from_le_bytes(len.try_into().unwrap()),
        }
    }

    /// Reads a header from the front of `buf`, which may hold more than the header.
    pub fn peek(buf: &[u8]) -> Result<Self, FrameError> {
        let head: &[u8; HEADER_LEN] =
            buf.get(..HEADER_LEN)
                .and_then(|h| h.try_into().ok())
                .ok_or(FrameError::TruncatedMessage {
                    available: buf.len(),
                    needed: HEADER_LEN as u64,
                })?;
        Ok(Self::from_bytes(head))
    }
}

/// Builds a frame: header followed by `payload`.
pub fn encode(key: HandlerKey, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(
        &MessageHeader {
            handler_key: key,
            payload_len: payload.len() as u64,
        }
        .to_bytes(),
    );
    out.extend_from_slice(payload);
    out
}

/// Splits a complete frame into key and payload. The buffer must hold
/// exactly one frame.
pub fn decode(buffer: &[u8]) -> Result<(HandlerKey, &[u8]), FrameError> {
    decode_with_limit(buffer, usize::MAX)
}

pub fn decode_with_limit(buffer: &[u8], max_payload: usize) -> Result<(HandlerKey, &[u8]), FrameError> {
    let header = MessageHeader::peek(buffer)?;
    if header.payload_len > max_payload as u64 {
        return Err(FrameError::FrameTooLarge {
            len: header.payload_len,
            max: max_payload,
        });
    }
    let body = &buffer[HEADER_LEN..];
    match (body.len() as u64).cmp(&header.payload_len) {
        std::cmp::Ordering::Less => Err(FrameError::TruncatedMessage {
            available: buffer.len(),
            needed: HEADER_LEN as u64 + header.payload_len,
        }),
        std::cmp::Ordering::Greater => Err(FrameError::TrailingGarbage {
            extra: body.len() - header.payload_len as usize,
        }),
        std::cmp::Ordering::Equal => Ok((header.handler_key, body)),
    }
}

/// An owned, validated frame. The payload is a view into the frame buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct ActiveMessage {
    key: HandlerKey,
    frame: Vec<u8>,
}

impl ActiveMessage {
    pub fn new(key: HandlerKey, payload: &[u8]) -> Self {
        ActiveMessage {
            key,
            frame: encode(key, payload),
        }
    }

    /// Builds a frame whose payload is the concatenation of `parts`.
    pub fn from_parts(key: HandlerKey, parts: &[&[u8]]) -> Self {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let mut frame = Vec::with_capacity(HEADER_LEN + len);
        frame.extend_from_slice(
            &MessageHeader {
                handler_key: key,
                payload_len: len as u64,
            }
            .to_bytes(),
        );
        for part in parts {
            frame.extend_from_slice(part);
        }
        ActiveMessage { key, frame }
    }

    /// Validates a received frame without copying it.
    pub fn from_frame(frame: Vec<u8>, max_payload: usize) -> Result<Self, FrameError> {
        let (key, _) = decode_with_limit(&frame, max_payload)?;
        Ok(ActiveMessage { key, frame })
    }

    pub fn key(&self) -> HandlerKey {
        self.key
    }

    pub fn header(&self) -> MessageHeader {
        MessageHeader {
            handler_key: self.key,
            payload_len: self.payload().len() as u64,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.frame[HEADER_LEN..]
    }

    pub fn as_frame(&self) -> &[u8] {
        &self.frame
    }

    pub fn into_frame(self) -> Vec<u8> {
        self.frame
    }
}

impl fmt::Debug for ActiveMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActiveMessage")
            .field("key", &self.key.0)
            .field("payload_len", &self.payload().len())
            .finish()
    }
}

/// How received messages are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionPolicy {
    /// Run the handler inline on the receiving context.
    Direct,
    /// Hand the message to a fixed worker pool. Messages from one sender
    /// always go to the same worker, which keeps per-sender FIFO order.
    Queued { workers: usize, capacity: usize },
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        ExecutionPolicy::Direct
    }
}

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

impl FromStr for ExecutionPolicy {
    type Err = String;

    /// `direct` or `queued:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("direct") {
            return Ok(ExecutionPolicy::Direct);
        }
        if let Some(n) = s.strip_prefix("queued:") {
            let workers: usize = n
                .parse()
                .map_err(|_| format!("invalid worker count in policy {s:?}"))?;
            if workers == 0 {
                return Err("queued policy needs at least one worker".into());
            }
            return Ok(ExecutionPolicy::Queued {
                workers,
                capacity: DEFAULT_QUEUE_CAPACITY,
            });
        }
        Err(format!("unknown execution policy {s:?} (expected direct or queued:N)"))
    }
}

impl fmt::Display for ExecutionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionPolicy::Direct => f.write_str("direct"),
            ExecutionPolicy::Queued { workers, .. } => write!(f, "queued:{workers}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DispatchError {
    #[error("unknown handler key {key} (handler count {count})")]
    UnknownHandlerKey { key: u64, count: usize },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("dispatch queue is closed")]
    QueueClosed,
}

fn check_key<C>(registry: &Registry<C>, key: HandlerKey) -> Result<(), DispatchError> {
    if !registry.is_initialized() {
        return Err(RegistryError::NotInitialized.into());
    }
    if key.0 >= registry.handler_count() as u64 {
        return Err(DispatchError::UnknownHandlerKey {
            key: key.0,
            count: registry.handler_count(),
        });
    }
    Ok(())
}

/// Runs the handler for `msg` inline.
pub fn dispatch<C>(registry: &Registry<C>, msg: &ActiveMessage, ctx: &C) -> Result<(), DispatchError> {
    check_key(registry, msg.key())?;
    registry.invoke(msg.key(), ctx, msg.payload())?;
    Ok(())
}

struct Job<C> {
    msg: ActiveMessage,
    ctx: C,
}

/// Executes messages according to an [`ExecutionPolicy`].
pub struct Dispatcher<C> {
    registry: Arc<Registry<C>>,
    queues: Vec<Sender<Job<C>>>,
    workers: Vec<JoinHandle<()>>,
}

impl<C: Send + 'static> Dispatcher<C> {
    pub fn new(registry: Arc<Registry<C>>, policy: ExecutionPolicy) -> Self {
        let mut queues = Vec::new();
        let mut workers = Vec::new();
        if let ExecutionPolicy::Queued { workers: n, capacity } = policy {
            for i in 0..n.max(1) {
                let (tx, rx) = bounded::<Job<C>>(capacity.max(1));
                let registry = registry.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("ham-worker-{i}"))
                    .spawn(move || {
                        for job in rx {
                            // Keys were checked before enqueueing.
                            let _ = registry.invoke(job.msg.key(), &job.ctx, job.msg.payload());
                        }
                    })
                    .expect("spawn dispatch worker");
                queues.push(tx);
                workers.push(handle);
            }
        }
        Dispatcher {
            registry,
            queues,
            workers,
        }
    }

    pub fn registry(&self) -> &Arc<Registry<C>> {
        &self.registry
    }

    pub fn is_queued(&self) -> bool {
        !self.queues.is_empty()
    }

    /// Executes or enqueues `msg`. Unknown keys are rejected before anything runs.
    pub fn dispatch(&self, sender: NodeId, msg: ActiveMessage, ctx: C) -> Result<(), DispatchError> {
        check_key(&self.registry, msg.key())?;
        if self.queues.is_empty() {
            return self.dispatch_inline(&msg, &ctx);
        }
        let queue = &self.queues[(sender.0 % self.queues.len() as u64) as usize];
        queue
            .send(Job { msg, ctx })
            .map_err(|_| DispatchError::QueueClosed)
    }

    /// Executes `msg` on the calling context regardless of policy.
    pub fn dispatch_inline(&self, msg: &ActiveMessage, ctx: &C) -> Result<(), DispatchError> {
        dispatch(&self.registry, msg, ctx)
    }

    /// Closes the queues and waits until every queued message has run.
    pub fn drain(&mut self) {
        self.queues.clear();
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}

impl<C> Drop for Dispatcher<C> {
    fn drop(&mut self) {
        self.queues.clear();
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn encode_zero_case() {
        assert_eq!(encode(HandlerKey(0), &[]), vec![0u8; 16]);
    }

    #[test]
    fn encode_hand_assembled() {
        let expected = [
            0x02, 0, 0, 0, 0, 0, 0, 0, //
            0x01, 0, 0, 0, 0, 0, 0, 0, //
            0xAB,
        ];
        assert_eq!(encode(HandlerKey(2), &[0xAB]), expected);
        assert_eq!(decode(&expected), Ok((HandlerKey(2), &[0xAB][..])));
    }

    #[test]
    fn decode_zero_frame() {
        assert_eq!(decode(&[0u8; 16]), Ok((HandlerKey(0), &[][..])));
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(
            decode(&[0u8; 10]),
            Err(FrameError::TruncatedMessage { available: 10, .. })
        ));
        let mut short = encode(HandlerKey(1), &[1, 2, 3]);
        short.pop();
        assert!(matches!(decode(&short), Err(FrameError::TruncatedMessage { .. })));
        let mut long = encode(HandlerKey(1), &[1, 2, 3]);
        long.push(9);
        assert_eq!(decode(&long), Err(FrameError::TrailingGarbage { extra: 1 }));
    }

    #[test]
    fn oversize_rejected() {
        let frame = encode(HandlerKey(0), &[0u8; 100]);
        assert_eq!(
            decode_with_limit(&frame, 99),
            Err(FrameError::FrameTooLarge { len: 100, max: 99 })
        );
        // A lying header must not trigger an allocation or a panic.
        let mut header = MessageHeader {
            handler_key: HandlerKey(0),
            payload_len: u64::MAX,
        }
        .to_bytes()
        .to_vec();
        header.push(0);
        assert!(ActiveMessage::from_frame(header, DEFAULT_MAX_PAYLOAD).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("direct".parse(), Ok(ExecutionPolicy::Direct));
        assert_eq!(
            "queued:4".parse(),
            Ok(ExecutionPolicy::Queued {
                workers: 4,
                capacity: DEFAULT_QUEUE_CAPACITY
            })
        );
        assert!("queued:0".parse::<ExecutionPolicy>().is_err());
        assert!("fast".parse::<ExecutionPolicy>().is_err());
    }

    type Log = Mutex<Vec<Vec<u8>>>;

    fn logging_registry() -> Registry<Arc<Log>> {
        let mut reg: Registry<Arc<Log>> = Registry::new();
        reg.register(
            "log",
            Arc::new(|log: &Arc<Log>, p: &[u8]| log.lock().unwrap().push(p.to_vec())),
        )
        .unwrap();
        reg.register("other", Arc::new(|_: &Arc<Log>, _: &[u8]| {}))
            .unwrap();
        reg.init().unwrap();
        reg
    }

    #[test]
    fn direct_dispatch_runs_before_return() {
        let reg = logging_registry();
        let log = Arc::new(Log::default());
        let msg = ActiveMessage::new(reg.key_of("log").unwrap(), b"hello");
        dispatch(&reg, &msg, &log).unwrap();
        assert_eq!(log.lock().unwrap().as_slice(), &[b"hello".to_vec()]);
    }

    #[test]
    fn dispatch_equals_direct_call() {
        let reg = logging_registry();
        let via_dispatch = Arc::new(Log::default());
        let via_call = Arc::new(Log::default());
        let key = reg.key_of("log").unwrap();
        let frame = encode(key, b"payload");
        let msg = ActiveMessage::from_frame(frame, DEFAULT_MAX_PAYLOAD).unwrap();
        dispatch(&reg, &msg, &via_dispatch).unwrap();
        reg.handler_of(key).unwrap()(&via_call, b"payload");
        assert_eq!(*via_dispatch.lock().unwrap(), *via_call.lock().unwrap());
    }

    #[test]
    fn unknown_key_rejected() {
        let reg = Arc::new(logging_registry());
        let log = Arc::new(Log::default());
        let msg = ActiveMessage::new(HandlerKey(2), b"");
        assert_eq!(
            dispatch(&reg, &msg, &log),
            Err(DispatchError::UnknownHandlerKey { key: 2, count: 2 })
        );
        let queued = Dispatcher::new(
            reg,
            ExecutionPolicy::Queued {
                workers: 2,
                capacity: 4,
            },
        );
        assert!(matches!(
            queued.dispatch(NodeId(0), msg, log),
            Err(DispatchError::UnknownHandlerKey { .. })
        ));
    }

    #[test]
    fn queued_preserves_per_sender_order() {
        let reg = Arc::new(logging_registry());
        let key = reg.key_of("log").unwrap();
        let log = Arc::new(Log::default());
        let mut dispatcher = Dispatcher::new(
            reg,
            ExecutionPolicy::Queued {
                workers: 2,
                capacity: 8,
            },
        );
        let senders = 3u64;
        let per_sender = 500u32;
        for seq in 0..per_sender {
            for s in 0..senders {
                let mut p = s.to_le_bytes().to_vec();
                p.extend_from_slice(&seq.to_le_bytes());
                dispatcher
                    .dispatch(NodeId(s), ActiveMessage::new(key, &p), log.clone())
                    .unwrap();
            }
        }
        dispatcher.drain();
        let seen = log.lock().unwrap();
        assert_eq!(seen.len(), (senders as usize) * per_sender as usize);
        let mut last = vec![None::<u32>; senders as usize];
        for p in seen.iter() {
            let s = u64::from_le_bytes(p[..8].try_into().unwrap()) as usize;
            let seq = u32::from_le_bytes(p[8..].try_into().unwrap());
            assert!(last[s].map_or(true, |prev| seq == prev + 1), "sender {s} out of order");
            last[s] = Some(seq);
        }
    }
}

//! Offload layer: asynchronous calls with futures, remote buffers, the
//! receive loop and the terminate protocol.
//!
//! Everything travels as ordinary active messages. The runtime registers a
//! few internal handlers (names starting with `__ham.`) in every registry it
//! creates, so they take part in key assignment like any user function.
//!
//! Results come back through `__ham.result`, whose payload is
//! `request_id u64 LE ‖ status u8 ‖ body`. Status 0 means success and the body
//! holds the encoded result; any other status is a [`RemoteErrorKind`] code and
//! the body is a UTF-8 message.

pub mod cluster;
mod future;
mod memory;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

pub use future::OffloadFuture;
pub use memory::{f64_bytes, f64_values, local, LocalError, RemoteBufferHandle};

use crate::messages::{ActiveMessage, DispatchError, Dispatcher, ExecutionPolicy, DEFAULT_MAX_PAYLOAD};
use crate::registry::{Handler, HandlerKey, Registry, RegistryError};
use crate::remote_function::{
    ArgList, CallContext, Closure, Migratable, RemoteError, RemoteErrorKind, RequestHeader, TypedClosure,
    REQUEST_HEADER_LEN,
};
use crate::transport::{Incoming, NodeId, Transport, TransportError, DEFAULT_CONNECT_TIMEOUT};
use future::Slot;
use memory::AllocationTable;

pub const RESULT_HANDLER: &str = "__ham.result";
pub const ALLOC_HANDLER: &str = "__ham.alloc";
pub const FREE_HANDLER: &str = "__ham.free";
pub const PUT_HANDLER: &str = "__ham.put";
pub const GET_HANDLER: &str = "__ham.get";
pub const STATS_HANDLER: &str = "__ham.stats";
pub const TERMINATE_HANDLER: &str = "__ham.terminate";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

/// Result-message bytes in front of the body: request id and status.
const RESULT_HEADER_LEN: usize = 9;

/// Room kept below the frame limit for request headers and tokens, so a
/// buffer of the maximum size can still be moved with one put or get.
const BUFFER_OVERHEAD: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OffloadError {
    #[error("remote call failed: {0}")]
    Remote(RemoteError),
    #[error("{0} is gone")]
    PeerGone(NodeId),
    #[error("{0} is not part of this configuration")]
    UnknownPeer(NodeId),
    #[error("no function registered as {0:?}")]
    UnknownName(String),
    #[error("buffer holds {expected} bytes, got {got}")]
    SizeMismatch { expected: u64, got: u64 },
    #[error("message with {len} payload bytes exceeds the frame limit of {max}")]
    TooLarge { len: usize, max: usize },
    #[error("malformed result: {0}")]
    MalformedResult(String),
    #[error("timed out waiting for the result")]
    TimedOut,
    #[error("runtime is shut down")]
    Shutdown,
    #[error("transport error: {0}")]
    Transport(String),
}

impl OffloadError {
    pub fn remote_kind(&self) -> Option<RemoteErrorKind> {
        match self {
            OffloadError::Remote(e) => Some(e.kind),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Offload(#[from] OffloadError),
    #[error("unknown handler key {key} from {from} (handler count {count})")]
    UnknownHandlerKey { key: u64, from: NodeId, count: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("dispatch failed: {0}")]
    Dispatch(DispatchError),
    #[error("lost {0} before being told to terminate")]
    PeerLost(NodeId),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl RuntimeError {
    /// Process exit code: 3 for protocol errors, 4 for transport failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::UnknownHandlerKey { .. } | RuntimeError::MalformedFrame(_) => EXIT_PROTOCOL,
            RuntimeError::Transport(TransportError::DigestMismatch { .. })
            | RuntimeError::Transport(TransportError::MalformedFrame(_)) => EXIT_PROTOCOL,
            RuntimeError::Config(_) | RuntimeError::Transport(TransportError::Config(_)) => EXIT_USAGE,
            _ => EXIT_TRANSPORT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub policy: ExecutionPolicy,
    /// Largest payload of a single frame.
    pub max_payload: usize,
    pub connect_timeout: Duration,
    /// How long [`Runtime::terminate`] waits for the target's acknowledgment.
    pub terminate_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            policy: ExecutionPolicy::Direct,
            max_payload: DEFAULT_MAX_PAYLOAD,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            terminate_timeout: Duration::from_secs(5),
        }
    }
}

impl RuntimeConfig {
    /// Defaults overridden by `HAM_POLICY` and `HAM_MAX_FRAME` when set.
    pub fn from_env() -> Result<Self, RuntimeError> {
        let mut config = RuntimeConfig::default();
        if let Ok(policy) = std::env::var("HAM_POLICY") {
            config.policy = policy.parse().map_err(RuntimeError::Config)?;
        }
        if let Ok(max) = std::env::var("HAM_MAX_FRAME") {
            config.max_payload = max
                .trim()
                .parse()
                .map_err(|_| RuntimeError::Config(format!("HAM_MAX_FRAME={max:?} is not a byte count")))?;
        }
        Ok(config)
    }

    /// Largest buffer that can be allocated and moved in one message.
    pub fn max_buffer_bytes(&self) -> usize {
        self.max_payload.saturating_sub(BUFFER_OVERHEAD)
    }
}

/// Counts reported by [`Runtime::audit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PendingAudit {
    /// Requests still waiting for a result.
    pub outstanding: usize,
    /// Requests that were still waiting when the runtime shut down.
    pub orphaned: usize,
    /// Result messages that matched no waiting request.
    pub unmatched: u64,
}

impl PendingAudit {
    pub fn is_clean(&self) -> bool {
        *self == PendingAudit::default()
    }
}

#[derive(Default)]
struct Book {
    pending: HashMap<u64, (NodeId, Arc<Slot>)>,
    lost: HashSet<NodeId>,
    terminated: HashSet<NodeId>,
    closed: bool,
    orphaned: usize,
}

#[derive(Clone, Copy)]
struct InternalKeys {
    result: HandlerKey,
    alloc: HandlerKey,
    free: HandlerKey,
    put: HandlerKey,
    get: HandlerKey,
    stats: HandlerKey,
    terminate: HandlerKey,
}

pub(crate) struct Shared {
    node: NodeId,
    nodes: BTreeSet<NodeId>,
    transport: Arc<dyn Transport>,
    registry: Arc<Registry<NodeContext>>,
    keys: InternalKeys,
    config: RuntimeConfig,
    next_request: AtomicU64,
    book: Mutex<Book>,
    unmatched: AtomicU64,
    allocations: Mutex<AllocationTable>,
    stop: Mutex<Option<RequestHeader>>,
    loop_running: AtomicBool,
}

impl Shared {
    fn complete(&self, request_id: u64, outcome: Result<Vec<u8>, OffloadError>) {
        let entry = self.book.lock().unwrap().pending.remove(&request_id);
        match entry {
            Some((_, slot)) => {
                slot.complete(outcome);
            }
            None => {
                self.unmatched.fetch_add(1, Ordering::Relaxed);
                log::warn!("{}: result for unknown request {request_id}", self.node);
            }
        }
    }

    /// Fails everything waiting on `peer`. Returns true if we had told it to terminate.
    fn peer_lost(&self, peer: NodeId) -> bool {
        let mut book = self.book.lock().unwrap();
        book.lost.insert(peer);
        let failed: Vec<u64> = book
            .pending
            .iter()
            .filter(|(_, (target, _))| *target == peer)
            .map(|(id, _)| *id)
            .collect();
        for id in failed {
            let (_, slot) = book.pending.remove(&id).unwrap();
            slot.complete(Err(OffloadError::PeerGone(peer)));
        }
        book.terminated.contains(&peer)
    }

    fn all_peers_lost(&self) -> bool {
        let book = self.book.lock().unwrap();
        self.nodes.iter().all(|n| *n == self.node || book.lost.contains(n))
    }
}

/// Execution context handed to every handler.
#[derive(Clone)]
pub struct NodeContext {
    shared: Arc<Shared>,
    source: NodeId,
}

impl NodeContext {
    pub fn node(&self) -> NodeId {
        self.shared.node
    }

    /// The node that sent the message being handled.
    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn runtime(&self) -> Runtime {
        Runtime {
            shared: self.shared.clone(),
        }
    }
}

impl CallContext for NodeContext {
    fn reply(&self, origin: NodeId, request_id: u64, outcome: Result<Vec<u8>, RemoteError>) {
        let s = &self.shared;
        let max = s.transport.max_frame();
        let oversized;
        let (status, body): (u8, &[u8]) = match &outcome {
            Ok(bytes) if RESULT_HEADER_LEN + bytes.len() > max => {
                oversized = format!("result of {} bytes exceeds the frame limit of {max}", bytes.len());
                (RemoteErrorKind::Failed as u8, oversized.as_bytes())
            }
            Ok(bytes) => (0, bytes),
            Err(e) => (e.kind as u8, e.message.as_bytes()),
        };
        let msg = ActiveMessage::from_parts(s.keys.result, &[&request_id.to_le_bytes(), &[status], body]);
        if let Err(e) = s.transport.send(origin, msg.into_frame()) {
            log::warn!("{}: dropping result of request {request_id} for {origin}: {e}", s.node);
        }
    }

    fn scope<T>(&self, f: impl FnOnce() -> T) -> T {
        memory::with_current(&self.shared, f)
    }
}

fn malformed(e: impl std::fmt::Display) -> RemoteError {
    RemoteError::new(RemoteErrorKind::MalformedArguments, e.to_string())
}

/// Wraps a request/reply internal handler.
fn internal(f: fn(&NodeContext, &[u8]) -> Result<Vec<u8>, RemoteError>) -> Handler<NodeContext> {
    Arc::new(move |ctx: &NodeContext, payload: &[u8]| {
        let Some((req, body)) = RequestHeader::split(payload) else {
            log::error!("{}: internal request without request header dropped", ctx.node());
            return;
        };
        ctx.reply(req.origin, req.request_id, f(ctx, body));
    })
}

fn handle_result(ctx: &NodeContext, payload: &[u8]) {
    if payload.len() < RESULT_HEADER_LEN {
        log::error!("{}: result message of {} bytes dropped", ctx.node(), payload.len());
        return;
    }
    let request_id = u64::from_le_bytes(payload[..8].try_into().unwrap());
    let status = payload[8];
    let body = &payload[RESULT_HEADER_LEN..];
    let outcome = match (status, RemoteErrorKind::from_code(status)) {
        (0, _) => Ok(body.to_vec()),
        (_, Some(kind)) => Err(OffloadError::Remote(RemoteError::new(
            kind,
            String::from_utf8_lossy(body),
        ))),
        (_, None) => Err(OffloadError::MalformedResult(format!("unknown status {status}"))),
    };
    ctx.shared.complete(request_id, outcome);
}

fn handle_alloc(ctx: &NodeContext, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
    let (count, elem_size) = <(u64, u64)>::decode_all(body).map_err(malformed)?;
    let limit = ctx.shared.config.max_buffer_bytes();
    let token = ctx.shared.allocations.lock().unwrap().allocate(count, elem_size, limit)?;
    Ok(token.to_le_bytes().to_vec())
}

fn handle_free(ctx: &NodeContext, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
    let (token,) = <(u64,)>::decode_all(body).map_err(malformed)?;
    ctx.shared.allocations.lock().unwrap().free(token)?;
    Ok(Vec::new())
}

fn handle_put(ctx: &NodeContext, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
    if body.len() < 8 {
        return Err(malformed("put without token"));
    }
    let (token, bytes) = body.split_at(8);
    let token = u64::from_le_bytes(token.try_into().unwrap());
    let buffer = ctx.shared.allocations.lock().unwrap().buffer(token)?;
    let mut data = buffer.lock().unwrap();
    if data.len() != bytes.len() {
        return Err(RemoteError::new(
            RemoteErrorKind::SizeMismatch,
            format!("buffer holds {} bytes, got {}", data.len(), bytes.len()),
        ));
    }
    data.copy_from_slice(bytes);
    Ok(Vec::new())
}

fn handle_get(ctx: &NodeContext, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
    let (token,) = <(u64,)>::decode_all(body).map_err(malformed)?;
    let buffer = ctx.shared.allocations.lock().unwrap().buffer(token)?;
    let data = buffer.lock().unwrap().clone();
    Ok(data)
}

fn handle_stats(ctx: &NodeContext, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
    <()>::decode_all(body).map_err(malformed)?;
    let live = ctx.shared.allocations.lock().unwrap().live() as u64;
    Ok(live.to_le_bytes().to_vec())
}

fn handle_terminate(ctx: &NodeContext, payload: &[u8]) {
    match RequestHeader::split(payload) {
        // Acknowledged by the receive loop once in-flight work has drained.
        Some((req, _)) => *ctx.shared.stop.lock().unwrap() = Some(req),
        None => log::error!("{}: terminate without request header dropped", ctx.node()),
    }
}

/// A registry that already holds the runtime's internal handlers.
pub fn new_registry() -> Registry<NodeContext> {
    let mut registry = Registry::new();
    let handlers: [(&str, Handler<NodeContext>); 7] = [
        (RESULT_HANDLER, Arc::new(handle_result)),
        (ALLOC_HANDLER, internal(handle_alloc)),
        (FREE_HANDLER, internal(handle_free)),
        (PUT_HANDLER, internal(handle_put)),
        (GET_HANDLER, internal(handle_get)),
        (STATS_HANDLER, internal(handle_stats)),
        (TERMINATE_HANDLER, Arc::new(handle_terminate)),
    ];
    for (name, handler) in handlers {
        registry.register(name, handler).expect("fresh registry");
    }
    registry
}

fn decode_migratable<R: Migratable>(bytes: &[u8]) -> Result<R, OffloadError> {
    R::from_bytes(bytes).map_err(|e| OffloadError::MalformedResult(e.to_string()))
}

fn decode_raw(bytes: &[u8]) -> Result<Vec<u8>, OffloadError> {
    Ok(bytes.to_vec())
}

fn transport_error(to: NodeId, e: TransportError) -> OffloadError {
    match e {
        TransportError::PeerGone(n) => OffloadError::PeerGone(n),
        TransportError::UnknownPeer(n) => OffloadError::UnknownPeer(n),
        TransportError::Shutdown => OffloadError::Shutdown,
        TransportError::FrameTooLarge { len, max } => OffloadError::TooLarge { len, max },
        other => OffloadError::Transport(format!("sending to {to}: {other}")),
    }
}

/// One node's offload runtime. Cheap to clone; clones share all state.
#[derive(Clone)]
pub struct Runtime {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("node", &self.shared.node)
            .field("handlers", &self.shared.registry.handler_count())
            .finish()
    }
}

impl Runtime {
    /// `registry` must come from [`new_registry`]; it is initialized here if
    /// that has not happened yet. `transport` must already be connected.
    pub fn new(
        mut registry: Registry<NodeContext>,
        transport: Arc<dyn Transport>,
        config: RuntimeConfig,
    ) -> Result<Self, RuntimeError> {
        if !registry.is_initialized() {
            registry.init()?;
        }
        let keys = InternalKeys {
            result: registry.key_of(RESULT_HANDLER)?,
            alloc: registry.key_of(ALLOC_HANDLER)?,
            free: registry.key_of(FREE_HANDLER)?,
            put: registry.key_of(PUT_HANDLER)?,
            get: registry.key_of(GET_HANDLER)?,
            stats: registry.key_of(STATS_HANDLER)?,
            terminate: registry.key_of(TERMINATE_HANDLER)?,
        };
        let config = RuntimeConfig {
            max_payload: config.max_payload.min(transport.max_frame()),
            ..config
        };
        Ok(Runtime {
            shared: Arc::new(Shared {
                node: transport.node(),
                nodes: transport.nodes().into_iter().collect(),
                transport,
                registry: Arc::new(registry),
                keys,
                config,
                next_request: AtomicU64::new(1),
                book: Mutex::default(),
                unmatched: AtomicU64::new(0),
                allocations: Mutex::default(),
                stop: Mutex::new(None),
                loop_running: AtomicBool::new(false),
            }),
        })
    }

    pub fn node(&self) -> NodeId {
        self.shared.node
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.shared.nodes.iter().copied().collect()
    }

    pub fn registry(&self) -> &Arc<Registry<NodeContext>> {
        &self.shared.registry
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.shared.transport
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    fn request<R>(
        &self,
        target: NodeId,
        key: HandlerKey,
        parts: &[&[u8]],
        decode: fn(&[u8]) -> Result<R, OffloadError>,
        terminating: bool,
    ) -> Result<OffloadFuture<R>, OffloadError> {
        let s = &self.shared;
        if !s.nodes.contains(&target) {
            return Err(OffloadError::UnknownPeer(target));
        }
        let len = REQUEST_HEADER_LEN + parts.iter().map(|p| p.len()).sum::<usize>();
        if len > s.config.max_payload {
            return Err(OffloadError::TooLarge {
                len,
                max: s.config.max_payload,
            });
        }
        let request_id = s.next_request.fetch_add(1, Ordering::Relaxed);
        let mut header = Vec::with_capacity(REQUEST_HEADER_LEN);
        RequestHeader {
            request_id,
            origin: s.node,
        }
        .write(&mut header);
        let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
        all.push(&header);
        all.extend_from_slice(parts);
        let msg = ActiveMessage::from_parts(key, &all);

        let slot = Arc::new(Slot::default());
        {
            let mut book = s.book.lock().unwrap();
            if book.closed {
                return Err(OffloadError::Shutdown);
            }
            if book.lost.contains(&target) || book.terminated.contains(&target) {
                return Err(OffloadError::PeerGone(target));
            }
            if terminating {
                book.terminated.insert(target);
            }
            book.pending.insert(request_id, (target, slot.clone()));
        }
        if let Err(e) = s.transport.send(target, msg.into_frame()) {
            let mut book = s.book.lock().unwrap();
            book.pending.remove(&request_id);
            if let TransportError::PeerGone(n) = e {
                book.lost.insert(n);
            }
            return Err(transport_error(target, e));
        }
        Ok(OffloadFuture::new(request_id, slot, decode))
    }

    /// Sends `closure` to `target`; the future completes when the result arrives.
    pub fn async_offload<R: Migratable>(
        &self,
        target: NodeId,
        closure: &TypedClosure<R>,
    ) -> Result<OffloadFuture<R>, OffloadError> {
        let c = closure.closure();
        let key = self.key_for(c)?;
        self.request(target, key, &[c.args()], decode_migratable::<R>, false)
    }

    /// Like [`async_offload`](Self::async_offload) for untyped closures; the
    /// future yields the encoded result bytes.
    pub fn async_offload_raw(&self, target: NodeId, closure: &Closure) -> Result<OffloadFuture<Vec<u8>>, OffloadError> {
        let key = self.key_for(closure)?;
        self.request(target, key, &[closure.args()], decode_raw, false)
    }

    pub fn sync_offload<R: Migratable>(&self, target: NodeId, closure: &TypedClosure<R>) -> Result<R, OffloadError> {
        self.async_offload(target, closure)?.get()
    }

    fn key_for(&self, closure: &Closure) -> Result<HandlerKey, OffloadError> {
        let name = closure.descriptor().name.as_str();
        self.shared
            .registry
            .key_of(name)
            .map_err(|_| OffloadError::UnknownName(name.to_owned()))
    }

    /// Reserves `count * elem_size` zeroed bytes on `target`.
    pub fn allocate(&self, target: NodeId, count: u64, elem_size: u64) -> Result<RemoteBufferHandle, OffloadError> {
        let mut args = Vec::with_capacity(16);
        (count, elem_size).encode_all(&mut args);
        let token = self
            .request(target, self.shared.keys.alloc, &[&args], decode_migratable::<u64>, false)?
            .get()?;
        Ok(RemoteBufferHandle {
            node: target,
            token,
            count,
            elem_size,
        })
    }

    pub fn free(&self, handle: &RemoteBufferHandle) -> Result<(), OffloadError> {
        self.request(
            handle.node,
            self.shared.keys.free,
            &[&handle.token.to_le_bytes()],
            decode_migratable::<()>,
            false,
        )?
        .get()
    }

    /// Copies `src` into the remote buffer. `src` must match its size exactly.
    pub fn put(&self, src: &[u8], dst: &RemoteBufferHandle) -> Result<OffloadFuture<()>, OffloadError> {
        let expected = dst.byte_len();
        if src.len() as u64 != expected || dst.count.checked_mul(dst.elem_size).is_none() {
            return Err(OffloadError::SizeMismatch {
                expected,
                got: src.len() as u64,
            });
        }
        self.request(
            dst.node,
            self.shared.keys.put,
            &[&dst.token.to_le_bytes(), src],
            decode_migratable::<()>,
            false,
        )
    }

    pub fn get_async(&self, src: &RemoteBufferHandle) -> Result<OffloadFuture<Vec<u8>>, OffloadError> {
        self.request(src.node, self.shared.keys.get, &[&src.token.to_le_bytes()], decode_raw, false)
    }

    /// Returns the remote buffer's current contents.
    pub fn get(&self, src: &RemoteBufferHandle) -> Result<Vec<u8>, OffloadError> {
        let bytes = self.get_async(src)?.get()?;
        if bytes.len() as u64 != src.byte_len() {
            return Err(OffloadError::SizeMismatch {
                expected: src.byte_len(),
                got: bytes.len() as u64,
            });
        }
        Ok(bytes)
    }

    /// Number of live allocations on `target`.
    pub fn live_allocations(&self, target: NodeId) -> Result<u64, OffloadError> {
        self.request(target, self.shared.keys.stats, &[], decode_migratable::<u64>, false)?
            .get()
    }

    /// Tells `target` to finish its in-flight work and exit its receive loop,
    /// then waits for the acknowledgment. Later offloads to it fail with
    /// [`OffloadError::PeerGone`]. Terminating oneself shuts the runtime down.
    pub fn terminate(&self, target: NodeId) -> Result<(), OffloadError> {
        if target == self.shared.node {
            self.shutdown();
            return Ok(());
        }
        self.request(target, self.shared.keys.terminate, &[], decode_migratable::<()>, true)?
            .get_timeout(self.shared.config.terminate_timeout)
    }

    /// Terminates every other node not terminated yet; returns the first
    /// failure, if any.
    pub fn terminate_all(&self) -> Result<(), OffloadError> {
        let mut first = None;
        let done = self.shared.book.lock().unwrap().terminated.clone();
        for node in self.nodes() {
            if node != self.shared.node && !done.contains(&node) {
                if let Err(e) = self.terminate(node) {
                    log::warn!("terminating {node}: {e}");
                    first.get_or_insert(e);
                }
            }
        }
        first.map_or(Ok(()), Err)
    }

    pub fn audit(&self) -> PendingAudit {
        let book = self.shared.book.lock().unwrap();
        PendingAudit {
            outstanding: book.pending.len(),
            orphaned: book.orphaned,
            unmatched: self.shared.unmatched.load(Ordering::Relaxed),
        }
    }

    /// Closes the transport and fails every waiting future. Idempotent.
    pub fn shutdown(&self) {
        let s = &self.shared;
        {
            let mut book = s.book.lock().unwrap();
            if !book.closed {
                book.closed = true;
                let pending: Vec<_> = book.pending.drain().collect();
                book.orphaned += pending.len();
                for (_, (_, slot)) in pending {
                    slot.complete(Err(OffloadError::Shutdown));
                }
            }
        }
        s.transport.shutdown();
    }

    /// Receives and executes messages until this node is told to terminate or
    /// the runtime is shut down. Handlers run according to the configured
    /// policy; results and terminate requests always run on this context.
    ///
    /// Only one receive loop may run per runtime.
    pub fn run_receive_loop(&self) -> Result<(), RuntimeError> {
        let s = &self.shared;
        if s.loop_running.swap(true, Ordering::AcqRel) {
            return Err(RuntimeError::Config("receive loop is already running".into()));
        }
        let mut dispatcher = Dispatcher::new(s.registry.clone(), s.config.policy);
        let outcome = self.receive(&dispatcher);
        dispatcher.drain();
        if let Ok(Some(req)) = &outcome {
            let ctx = NodeContext {
                shared: s.clone(),
                source: req.origin,
            };
            ctx.reply(req.origin, req.request_id, Ok(Vec::new()));
            log::debug!("{}: terminated by {}", s.node, req.origin);
        }
        self.shutdown();
        outcome.map(drop)
    }

    pub fn spawn_receive_loop(&self) -> JoinHandle<Result<(), RuntimeError>> {
        let rt = self.clone();
        std::thread::Builder::new()
            .name(format!("ham-recv-{}", self.shared.node.0))
            .spawn(move || rt.run_receive_loop())
            .expect("spawn receive loop")
    }

    fn receive(&self, dispatcher: &Dispatcher<NodeContext>) -> Result<Option<RequestHeader>, RuntimeError> {
        let s = &self.shared;
        loop {
            let incoming = match s.transport.recv() {
                Ok(incoming) => incoming,
                Err(TransportError::Shutdown) => return Ok(None),
                Err(TransportError::MalformedFrame(reason)) => {
                    log::error!("{}: {reason}", s.node);
                    return Err(RuntimeError::MalformedFrame(reason));
                }
                Err(e) => return Err(e.into()),
            };
            match incoming {
                Incoming::Frame { from, frame } => {
                    let msg = ActiveMessage::from_frame(frame, s.config.max_payload).map_err(|e| {
                        log::error!("{}: malformed frame from {from}: {e}", s.node);
                        RuntimeError::MalformedFrame(format!("from {from}: {e}"))
                    })?;
                    let key = msg.key();
                    let ctx = NodeContext {
                        shared: s.clone(),
                        source: from,
                    };
                    let dispatched = if key == s.keys.result || key == s.keys.terminate {
                        dispatcher.dispatch_inline(&msg, &ctx)
                    } else {
                        dispatcher.dispatch(from, msg, ctx)
                    };
                    match dispatched {
                        Ok(()) => {}
                        Err(DispatchError::UnknownHandlerKey { key, count }) => {
                            log::error!("unknown handler key {key} from {from} (handler count {count}); aborting");
                            return Err(RuntimeError::UnknownHandlerKey { key, from, count });
                        }
                        Err(e) => return Err(RuntimeError::Dispatch(e)),
                    }
                    if let Some(req) = s.stop.lock().unwrap().take() {
                        return Ok(Some(req));
                    }
                }
                Incoming::PeerLost(peer) => {
                    let expected = s.peer_lost(peer);
                    log::debug!("{}: lost {peer}", s.node);
                    if !expected && s.node != NodeId::HOST && (peer == NodeId::HOST || s.all_peers_lost()) {
                        log::error!("{}: lost {peer} before being told to terminate", s.node);
                        return Err(RuntimeError::PeerLost(peer));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;

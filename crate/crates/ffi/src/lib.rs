//! C ABI over the `ham` runtime.
//!
//! Handles are opaque pointers. Every fallible call returns a [`HamStatus`];
//! on failure [`ham_last_error`] describes the cause for the calling thread.
//! Remote functions registered from C take and return one byte string; the
//! C side picks its own encoding for it.
//!
//! Runtimes returned by the connect functions already run their receive loop
//! on a background thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::Duration;

use ham::cli::NodeArgs;
use ham::remote_function::{register_function, RemoteErrorKind};
use ham::runtime::cluster::{connect_local, Backend};
use ham::runtime::{local, new_registry, LocalError, RemoteBufferHandle};
use ham::{NodeContext, NodeId, OffloadError, OffloadFuture, Registry, RemoteFn, Runtime, RuntimeConfig, RuntimeError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// Bad name, duplicate registration, registry already sealed.
    Registry = 3,
    UnknownName = 4,
    UnknownPeer = 5,
    /// Connecting failed or a peer went away.
    Transport = 6,
    /// Handler digests differ, or a malformed frame or unknown key arrived.
    Protocol = 7,
    /// The remote function reported an error or panicked.
    RemoteFailed = 8,
    MalformedArguments = 9,
    InvalidToken = 10,
    AllocationFailed = 11,
    SizeMismatch = 12,
    TooLarge = 13,
    TimedOut = 14,
    Shutdown = 15,
    /// A Rust panic was caught at the boundary.
    Panic = 16,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: HamStatus, msg: impl std::fmt::Display) -> HamStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into [`HamStatus::Panic`].
fn guard(f: impl FnOnce() -> HamStatus) -> HamStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(HamStatus::Panic, "panic inside ham"))
}

fn offload_status(e: &OffloadError) -> HamStatus {
    match e {
        OffloadError::Remote(r) => match r.kind {
            RemoteErrorKind::Failed => HamStatus::RemoteFailed,
            RemoteErrorKind::MalformedArguments => HamStatus::MalformedArguments,
            RemoteErrorKind::InvalidToken => HamStatus::InvalidToken,
            RemoteErrorKind::AllocationFailed => HamStatus::AllocationFailed,
            RemoteErrorKind::SizeMismatch => HamStatus::SizeMismatch,
        },
        OffloadError::PeerGone(_) | OffloadError::Transport(_) => HamStatus::Transport,
        OffloadError::UnknownPeer(_) => HamStatus::UnknownPeer,
        OffloadError::UnknownName(_) => HamStatus::UnknownName,
        OffloadError::SizeMismatch { .. } => HamStatus::SizeMismatch,
        OffloadError::TooLarge { .. } => HamStatus::TooLarge,
        OffloadError::MalformedResult(_) => HamStatus::Protocol,
        OffloadError::TimedOut => HamStatus::TimedOut,
        OffloadError::Shutdown => HamStatus::Shutdown,
    }
}

fn runtime_status(e: &RuntimeError) -> HamStatus {
    match e {
        RuntimeError::Registry(_) => HamStatus::Registry,
        RuntimeError::Offload(o) => offload_status(o),
        RuntimeError::Config(_) => HamStatus::InvalidArgument,
        RuntimeError::UnknownHandlerKey { .. } | RuntimeError::MalformedFrame(_) | RuntimeError::Dispatch(_) => {
            HamStatus::Protocol
        }
        RuntimeError::Transport(t) => match t {
            ham::TransportError::DigestMismatch { .. } | ham::TransportError::MalformedFrame(_) => HamStatus::Protocol,
            ham::TransportError::Config(_) => HamStatus::InvalidArgument,
            _ => HamStatus::Transport,
        },
        RuntimeError::PeerLost(_) => HamStatus::Transport,
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, HamStatus> {
    if p.is_null() {
        return Err(fail(HamStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HamStatus::InvalidArgument, "string argument is not UTF-8"))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize) -> Result<&'a [u8], HamStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HamStatus::NullArgument, "null data pointer with non-zero length"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! non_null {
    ($p:expr) => {
        if $p.is_null() {
            return fail(HamStatus::NullArgument, concat!(stringify!($p), " is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Byte string owned by the library; release with [`ham_bytes_free`].
#[repr(C)]
pub struct HamBytes {
    pub data: *mut u8,
    pub len: usize,
}

impl HamBytes {
    fn empty() -> Self {
        HamBytes {
            data: ptr::null_mut(),
            len: 0,
        }
    }

    fn from_vec(v: Vec<u8>) -> Self {
        if v.is_empty() {
            return Self::empty();
        }
        let boxed = v.into_boxed_slice();
        let len = boxed.len();
        HamBytes {
            data: Box::into_raw(boxed) as *mut u8,
            len,
        }
    }
}

/// A buffer on some node. Plain data; copying it does not copy the buffer.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HamBuffer {
    pub node: u64,
    pub token: u64,
    pub count: u64,
    pub elem_size: u64,
}

impl From<RemoteBufferHandle> for HamBuffer {
    fn from(h: RemoteBufferHandle) -> Self {
        HamBuffer {
            node: h.node.0,
            token: h.token,
            count: h.count,
            elem_size: h.elem_size,
        }
    }
}

impl From<HamBuffer> for RemoteBufferHandle {
    fn from(b: HamBuffer) -> Self {
        RemoteBufferHandle {
            node: NodeId(b.node),
            token: b.token,
            count: b.count,
            elem_size: b.elem_size,
        }
    }
}

/// Output slot handed to a C remote function.
pub struct HamReply {
    data: Vec<u8>,
    error: Option<String>,
}

/// A C remote function. Returns 0 on success; anything else fails the call
/// at the origin, with the message set through [`ham_reply_set_error`] if any.
pub type HamFunction =
    Option<unsafe extern "C" fn(user_data: *mut c_void, args: *const u8, args_len: usize, reply: *mut HamReply) -> i32>;

type Bytes = RemoteFn<(Vec<u8>,), Vec<u8>>;

/// Names and callbacks collected before connecting.
pub struct HamRegistry {
    registry: Registry<NodeContext>,
    functions: HashMap<String, Bytes>,
}

struct UserFn {
    f: unsafe extern "C" fn(*mut c_void, *const u8, usize, *mut HamReply) -> i32,
    user_data: *mut c_void,
}

// The caller promises `user_data` may be used from the receive loop's thread.
unsafe impl Send for UserFn {}
unsafe impl Sync for UserFn {}

impl UserFn {
    fn call(&self, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut reply = HamReply {
            data: Vec::new(),
            error: None,
        };
        let rc = unsafe { (self.f)(self.user_data, args.as_ptr(), args.len(), &mut reply) };
        if rc == 0 {
            Ok(reply.data)
        } else {
            Err(reply.error.unwrap_or_else(|| format!("function returned {rc}")))
        }
    }
}

pub struct HamRuntime {
    runtime: Runtime,
    functions: HashMap<String, Bytes>,
    receiver: Mutex<Option<JoinHandle<Result<(), RuntimeError>>>>,
}

pub struct HamFuture {
    future: OffloadFuture<Vec<u8>>,
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ham_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn ham_status_str(status: HamStatus) -> *const c_char {
    let s: &'static CStr = match status {
        HamStatus::Ok => c"ok",
        HamStatus::NullArgument => c"null argument",
        HamStatus::InvalidArgument => c"invalid argument",
        HamStatus::Registry => c"registry error",
        HamStatus::UnknownName => c"unknown function name",
        HamStatus::UnknownPeer => c"unknown peer",
        HamStatus::Transport => c"transport error",
        HamStatus::Protocol => c"protocol error",
        HamStatus::RemoteFailed => c"remote function failed",
        HamStatus::MalformedArguments => c"malformed arguments",
        HamStatus::InvalidToken => c"invalid buffer token",
        HamStatus::AllocationFailed => c"allocation failed",
        HamStatus::SizeMismatch => c"size mismatch",
        HamStatus::TooLarge => c"message too large",
        HamStatus::TimedOut => c"timed out",
        HamStatus::Shutdown => c"runtime shut down",
        HamStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn ham_registry_new() -> *mut HamRegistry {
    Box::into_raw(Box::new(HamRegistry {
        registry: new_registry(),
        functions: HashMap::new(),
    }))
}

/// # Safety
/// `reg` must come from [`ham_registry_new`] and not have been consumed.
#[no_mangle]
pub unsafe extern "C" fn ham_registry_free(reg: *mut HamRegistry) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Registers `f` under `name`. `user_data` is passed back on every call, from
/// the receive loop's thread.
///
/// # Safety
/// `reg` must be a live registry and `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ham_registry_register(
    reg: *mut HamRegistry,
    name: *const c_char,
    f: HamFunction,
    user_data: *mut c_void,
) -> HamStatus {
    guard(|| {
        non_null!(reg);
        let name = tri!(str_arg(name));
        let Some(f) = f else {
            return fail(HamStatus::NullArgument, "function pointer is null");
        };
        let reg = &mut *reg;
        let user = UserFn { f, user_data };
        match register_function(&mut reg.registry, name, move |args: Vec<u8>| user.call(&args)) {
            Ok(handle) => {
                reg.functions.insert(name.to_owned(), handle);
                HamStatus::Ok
            }
            Err(e) => fail(HamStatus::Registry, e),
        }
    })
}

/// Sets the result bytes of the running call.
///
/// # Safety
/// `reply` must be the pointer passed to the running function.
#[no_mangle]
pub unsafe extern "C" fn ham_reply_set(reply: *mut HamReply, data: *const u8, len: usize) -> HamStatus {
    non_null!(reply);
    let data = tri!(bytes_arg(data, len));
    (*reply).data = data.to_vec();
    HamStatus::Ok
}

/// Sets the failure message reported when the function returns non-zero.
///
/// # Safety
/// `reply` must be the pointer passed to the running function; `message` a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ham_reply_set_error(reply: *mut HamReply, message: *const c_char) -> HamStatus {
    non_null!(reply);
    let message = tri!(str_arg(message));
    (*reply).error = Some(message.to_owned());
    HamStatus::Ok
}

fn start(runtime: Runtime, functions: HashMap<String, Bytes>) -> *mut HamRuntime {
    let receiver = runtime.spawn_receive_loop();
    Box::into_raw(Box::new(HamRuntime {
        runtime,
        functions,
        receiver: Mutex::new(Some(receiver)),
    }))
}

/// Connects this process as `node` to the TCP peers in `peer_list`
/// (`id=host:port,...`). Consumes `reg`, also on failure.
///
/// # Safety
/// `reg` must be a live registry, `peer_list` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_connect_tcp(
    reg: *mut HamRegistry,
    node: u64,
    peer_list: *const c_char,
    out: *mut *mut HamRuntime,
) -> HamStatus {
    guard(|| {
        non_null!(reg);
        let reg = Box::from_raw(reg);
        non_null!(out);
        let list = tri!(str_arg(peer_list));
        let args = NodeArgs {
            node: Some(node),
            peer_list: Some(list.to_owned()),
            ..Default::default()
        };
        let config = match RuntimeConfig::from_env() {
            Ok(c) => c,
            Err(e) => return fail(runtime_status(&e), e),
        };
        match ham::cli::connect_tcp(&args, reg.registry, config) {
            Ok(rt) => {
                *out = start(rt, reg.functions);
                HamStatus::Ok
            }
            Err(e) => fail(runtime_status(&e), e),
        }
    })
}

/// Transport used by [`ham_runtime_local`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamBackend {
    Loopback = 0,
    /// Localhost TCP with OS-assigned ports.
    Tcp = 1,
}

fn connect_in_process(backend: Backend, regs: Vec<Box<HamRegistry>>) -> Result<Vec<*mut HamRuntime>, RuntimeError> {
    let config = RuntimeConfig::default();
    let mut parts = Vec::with_capacity(regs.len());
    let mut digests = Vec::with_capacity(regs.len());
    for reg in regs {
        let HamRegistry { mut registry, functions } = *reg;
        registry.init()?;
        digests.push(registry.digest()?);
        parts.push((registry, functions));
    }
    let transports = connect_local(backend, &digests, &config)?;
    let mut runtimes = Vec::with_capacity(parts.len());
    for ((registry, functions), transport) in parts.into_iter().zip(transports) {
        runtimes.push((Runtime::new(registry, transport, config.clone())?, functions));
    }
    Ok(runtimes.into_iter().map(|(rt, f)| start(rt, f)).collect())
}

/// Builds `n` nodes inside this process, node `i` from `regs[i]`. Consumes
/// every registry, also on failure. On success `out[i]` receives node `i`.
///
/// # Safety
/// `regs` and `out` must point to `n` entries; each registry must be live.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_local(
    backend: HamBackend,
    regs: *const *mut HamRegistry,
    n: usize,
    out: *mut *mut HamRuntime,
) -> HamStatus {
    guard(|| {
        non_null!(regs);
        let regs = std::slice::from_raw_parts(regs, n);
        if regs.iter().any(|r| r.is_null()) {
            for &r in regs {
                ham_registry_free(r);
            }
            return fail(HamStatus::NullArgument, "null registry in list");
        }
        let regs: Vec<Box<HamRegistry>> = regs.iter().map(|&r| Box::from_raw(r)).collect();
        non_null!(out);
        if n == 0 {
            return fail(HamStatus::InvalidArgument, "no nodes");
        }
        let backend = match backend {
            HamBackend::Loopback => Backend::Loopback,
            HamBackend::Tcp => Backend::Tcp,
        };
        match connect_in_process(backend, regs) {
            Ok(runtimes) => {
                for (i, rt) in runtimes.into_iter().enumerate() {
                    *out.add(i) = rt;
                }
                HamStatus::Ok
            }
            Err(e) => fail(runtime_status(&e), e),
        }
    })
}

/// Shuts the runtime down, waits for its receive loop and releases it.
///
/// # Safety
/// `rt` must come from a connect function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_free(rt: *mut HamRuntime) {
    if rt.is_null() {
        return;
    }
    let rt = Box::from_raw(rt);
    rt.runtime.shutdown();
    let receiver = rt.receiver.lock().unwrap().take();
    if let Some(h) = receiver {
        let _ = h.join();
    }
}

/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_node(rt: *const HamRuntime) -> u64 {
    if rt.is_null() {
        return u64::MAX;
    }
    (*rt).runtime.node().0
}

/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_node_count(rt: *const HamRuntime) -> u64 {
    if rt.is_null() {
        return 0;
    }
    (*rt).runtime.nodes().len() as u64
}

/// Blocks until the receive loop ends, e.g. after a terminate request.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn ham_runtime_wait(rt: *const HamRuntime) -> HamStatus {
    guard(|| {
        non_null!(rt);
        let handle = (*rt).receiver.lock().unwrap().take();
        match handle.map(JoinHandle::join) {
            None | Some(Ok(Ok(()))) => HamStatus::Ok,
            Some(Ok(Err(e))) => fail(runtime_status(&e), e),
            Some(Err(_)) => fail(HamStatus::Panic, "receive loop panicked"),
        }
    })
}

/// Terminates `target`, which drains its in-flight work first.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn ham_terminate(rt: *const HamRuntime, target: u64) -> HamStatus {
    guard(|| {
        non_null!(rt);
        match (*rt).runtime.terminate(NodeId(target)) {
            Ok(()) => HamStatus::Ok,
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

/// Terminates every other node.
///
/// # Safety
/// `rt` must be a live runtime.
#[no_mangle]
pub unsafe extern "C" fn ham_terminate_all(rt: *const HamRuntime) -> HamStatus {
    guard(|| {
        non_null!(rt);
        match (*rt).runtime.terminate_all() {
            Ok(()) => HamStatus::Ok,
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

unsafe fn lookup<'a>(rt: &'a HamRuntime, name: *const c_char) -> Result<&'a Bytes, HamStatus> {
    let name = str_arg(name)?;
    rt.functions
        .get(name)
        .ok_or_else(|| fail(HamStatus::UnknownName, format!("{name} is not registered")))
}

/// Starts a call of `name(args)` on `target`.
///
/// # Safety
/// `rt` must be a live runtime, `name` NUL-terminated, `args` readable for
/// `args_len` bytes and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_offload_async(
    rt: *const HamRuntime,
    target: u64,
    name: *const c_char,
    args: *const u8,
    args_len: usize,
    out: *mut *mut HamFuture,
) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(out);
        let rt = &*rt;
        let f = tri!(lookup(rt, name));
        let args = tri!(bytes_arg(args, args_len));
        match rt.runtime.async_offload(NodeId(target), &f.make_closure((args.to_vec(),))) {
            Ok(future) => {
                *out = Box::into_raw(Box::new(HamFuture { future }));
                HamStatus::Ok
            }
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

/// Calls `name(args)` on `target` and waits for the result.
///
/// # Safety
/// As for [`ham_offload_async`]; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ham_offload_sync(
    rt: *const HamRuntime,
    target: u64,
    name: *const c_char,
    args: *const u8,
    args_len: usize,
    result: *mut HamBytes,
) -> HamStatus {
    let mut future = ptr::null_mut();
    let status = ham_offload_async(rt, target, name, args, args_len, &mut future);
    if status != HamStatus::Ok {
        return status;
    }
    let status = ham_future_get(future, result);
    ham_future_free(future);
    status
}

fn deliver(outcome: Result<Vec<u8>, OffloadError>, result: *mut HamBytes) -> HamStatus {
    match outcome {
        Ok(bytes) => {
            unsafe { *result = HamBytes::from_vec(bytes) };
            HamStatus::Ok
        }
        Err(e) => fail(offload_status(&e), e),
    }
}

/// Waits for the result. A future can be read more than once.
///
/// # Safety
/// `fut` must be a live future and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_future_get(fut: *const HamFuture, result: *mut HamBytes) -> HamStatus {
    guard(|| {
        non_null!(fut);
        non_null!(result);
        deliver((*fut).future.get(), result)
    })
}

/// Like [`ham_future_get`] but gives up after `timeout_ms` with
/// [`HamStatus::TimedOut`].
///
/// # Safety
/// `fut` must be a live future and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_future_get_timeout(fut: *const HamFuture, timeout_ms: u64, result: *mut HamBytes) -> HamStatus {
    guard(|| {
        non_null!(fut);
        non_null!(result);
        deliver((*fut).future.get_timeout(Duration::from_millis(timeout_ms)), result)
    })
}

/// # Safety
/// `fut` must be a live future.
#[no_mangle]
pub unsafe extern "C" fn ham_future_is_ready(fut: *const HamFuture) -> bool {
    !fut.is_null() && (*fut).future.is_ready()
}

/// # Safety
/// `fut` must come from [`ham_offload_async`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ham_future_free(fut: *mut HamFuture) {
    if !fut.is_null() {
        drop(Box::from_raw(fut));
    }
}

/// # Safety
/// `bytes` must hold a value filled in by this library, or be zeroed.
#[no_mangle]
pub unsafe extern "C" fn ham_bytes_free(bytes: *mut HamBytes) {
    if bytes.is_null() || (*bytes).data.is_null() {
        return;
    }
    let b = &mut *bytes;
    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    *b = HamBytes::empty();
}

/// Allocates `count * elem_size` zeroed bytes on `target`.
///
/// # Safety
/// `rt` must be a live runtime and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_buffer_allocate(
    rt: *const HamRuntime,
    target: u64,
    count: u64,
    elem_size: u64,
    out: *mut HamBuffer,
) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(out);
        match (*rt).runtime.allocate(NodeId(target), count, elem_size) {
            Ok(h) => {
                *out = h.into();
                HamStatus::Ok
            }
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

/// # Safety
/// `rt` must be a live runtime and `buf` readable.
#[no_mangle]
pub unsafe extern "C" fn ham_buffer_free(rt: *const HamRuntime, buf: *const HamBuffer) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(buf);
        match (*rt).runtime.free(&(*buf).into()) {
            Ok(()) => HamStatus::Ok,
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

/// Copies `len` bytes into the whole buffer; `len` must equal its size.
///
/// # Safety
/// `rt` must be a live runtime, `buf` readable and `src` readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ham_buffer_put(rt: *const HamRuntime, buf: *const HamBuffer, src: *const u8, len: usize) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(buf);
        let src = tri!(bytes_arg(src, len));
        match (*rt).runtime.put(src, &(*buf).into()).and_then(|f| f.get()) {
            Ok(()) => HamStatus::Ok,
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

/// Copies the whole buffer into `dst`; `len` must equal its size.
///
/// # Safety
/// `rt` must be a live runtime, `buf` readable and `dst` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ham_buffer_get(rt: *const HamRuntime, buf: *const HamBuffer, dst: *mut u8, len: usize) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(buf);
        let handle: RemoteBufferHandle = (*buf).into();
        if handle.byte_len() != len as u64 {
            return fail(
                HamStatus::SizeMismatch,
                format!("buffer holds {} bytes, destination {len}", handle.byte_len()),
            );
        }
        match (*rt).runtime.get(&handle) {
            Ok(data) => {
                if len > 0 {
                    non_null!(dst);
                    ptr::copy_nonoverlapping(data.as_ptr(), dst, len);
                }
                HamStatus::Ok
            }
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

fn local_status(e: &LocalError) -> HamStatus {
    match e {
        LocalError::NoContext | LocalError::WrongNode { .. } => HamStatus::InvalidArgument,
        LocalError::InvalidToken(_) => HamStatus::InvalidToken,
        LocalError::SizeMismatch { .. } => HamStatus::SizeMismatch,
    }
}

/// Reads a buffer owned by the node running the current remote function.
/// Only valid inside a remote function.
///
/// # Safety
/// `buf` must be readable and `dst` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ham_local_read(buf: *const HamBuffer, dst: *mut u8, len: usize) -> HamStatus {
    guard(|| {
        non_null!(buf);
        match local::read(&(*buf).into()) {
            Ok(data) if data.len() == len => {
                if len > 0 {
                    non_null!(dst);
                    ptr::copy_nonoverlapping(data.as_ptr(), dst, len);
                }
                HamStatus::Ok
            }
            Ok(data) => fail(
                HamStatus::SizeMismatch,
                format!("buffer holds {} bytes, destination {len}", data.len()),
            ),
            Err(e) => fail(local_status(&e), e),
        }
    })
}

/// Overwrites a buffer owned by the node running the current remote function.
/// Only valid inside a remote function.
///
/// # Safety
/// `buf` must be readable and `src` readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ham_local_write(buf: *const HamBuffer, src: *const u8, len: usize) -> HamStatus {
    guard(|| {
        non_null!(buf);
        let src = tri!(bytes_arg(src, len));
        match local::write(&(*buf).into(), src) {
            Ok(()) => HamStatus::Ok,
            Err(e) => fail(local_status(&e), e),
        }
    })
}

/// Live allocations on `target`, written to `out`.
///
/// # Safety
/// `rt` must be a live runtime and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ham_live_allocations(rt: *const HamRuntime, target: u64, out: *mut u64) -> HamStatus {
    guard(|| {
        non_null!(rt);
        non_null!(out);
        match (*rt).runtime.live_allocations(NodeId(target)) {
            Ok(n) => {
                *out = n;
                HamStatus::Ok
            }
            Err(e) => fail(offload_status(&e), e),
        }
    })
}

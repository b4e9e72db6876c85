//! Transferable function closures.
//!
//! A function is registered once under a stable name together with its
//! parameter and result codecs. Registration produces a handler that decodes
//! the argument bytes, calls the function and sends the encoded result back to
//! the caller. A [`Closure`] pairs the function's descriptor with arguments that
//! were serialized when the closure was built, so the payload that crosses the
//! wire is a flat byte string.
//!
//! Request payload layout: `request_id u64 LE ‖ origin u64 LE ‖ args`.

mod codec;

use std::any::Any;
use std::fmt;
use std::marker::PhantomData;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use thiserror::Error;

pub use codec::{decode_values, encode_values, ArgList, CodecError, CodecKind, Migratable, Value};

use crate::messages::ActiveMessage;
use crate::registry::{HandlerName, Registry, RegistryError};
use crate::transport::NodeId;

/// Bytes in front of the arguments: request id and origin node.
pub const REQUEST_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestHeader {
    pub request_id: u64,
    pub origin: NodeId,
}

impl RequestHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.origin.0.to_le_bytes());
    }

    /// Splits a request payload into its header and the remaining body.
    pub fn split(payload: &[u8]) -> Option<(RequestHeader, &[u8])> {
        if payload.len() < REQUEST_HEADER_LEN {
            return None;
        }
        let (head, body) = payload.split_at(REQUEST_HEADER_LEN);
        Some((
            RequestHeader {
                request_id: u64::from_le_bytes(head[..8].try_into().unwrap()),
                origin: NodeId(u64::from_le_bytes(head[8..].try_into().unwrap())),
            },
            body,
        ))
    }
}

/// Error category carried in a failed result message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RemoteErrorKind {
    Failed = 1,
    MalformedArguments = 2,
    InvalidToken = 3,
    AllocationFailed = 4,
    SizeMismatch = 5,
}

impl RemoteErrorKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => RemoteErrorKind::Failed,
            2 => RemoteErrorKind::MalformedArguments,
            3 => RemoteErrorKind::InvalidToken,
            4 => RemoteErrorKind::AllocationFailed,
            5 => RemoteErrorKind::SizeMismatch,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {message}")]
pub struct RemoteError {
    pub kind: RemoteErrorKind,
    pub message: String,
}

impl RemoteError {
    pub fn new(kind: RemoteErrorKind, message: impl Into<String>) -> Self {
        RemoteError {
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("malformed arguments: {0}")]
    MalformedArguments(#[from] CodecError),
    #[error("function failed: {0}")]
    Failed(String),
}

impl From<InvokeError> for RemoteError {
    fn from(e: InvokeError) -> Self {
        match e {
            InvokeError::MalformedArguments(c) => {
                RemoteError::new(RemoteErrorKind::MalformedArguments, c.to_string())
            }
            InvokeError::Failed(m) => RemoteError::new(RemoteErrorKind::Failed, m),
        }
    }
}

/// Execution context seen by generated function handlers.
pub trait CallContext {
    /// Delivers the outcome of request `request_id` to `origin`.
    fn reply(&self, origin: NodeId, request_id: u64, outcome: Result<Vec<u8>, RemoteError>);

    /// Wraps the user function call, e.g. to expose node-local state.
    fn scope<T>(&self, f: impl FnOnce() -> T) -> T {
        f()
    }
}

/// Type-erased decode → call → encode step of a registered function.
pub type Invoker = Arc<dyn Fn(&[u8]) -> Result<Vec<u8>, InvokeError> + Send + Sync>;

/// Portable identity of a registered function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDescriptor {
    pub name: HandlerName,
    pub params: Vec<CodecKind>,
    pub result: CodecKind,
}

/// Values a remote function may return: a plain result, or `Result<T, E>`
/// whose error becomes a remote failure at the caller.
pub trait Outcome<R> {
    fn into_outcome(self) -> Result<R, String>;
}

impl<R: Migratable> Outcome<R> for R {
    fn into_outcome(self) -> Result<R, String> {
        Ok(self)
    }
}

impl<R: Migratable, E: fmt::Display> Outcome<R> for Result<R, E> {
    fn into_outcome(self) -> Result<R, String> {
        self.map_err(|e| e.to_string())
    }
}

/// Plain functions usable as remote functions. `Args` is the parameter tuple.
pub trait IntoRemoteFn<Args, R>: Send + Sync + 'static {
    fn call_with(&self, args: Args) -> Result<R, String>;
}

macro_rules! into_remote_fn {
    ($($arg:ident),*) => {
        impl<F, O, R, $($arg),*> IntoRemoteFn<($($arg,)*), R> for F
        where
            F: Fn($($arg),*) -> O + Send + Sync + 'static,
            O: Outcome<R>,
            R: Migratable,
            $($arg: Migratable,)*
        {
            #[allow(non_snake_case)]
            fn call_with(&self, ($($arg,)*): ($($arg,)*)) -> Result<R, String> {
                self($($arg),*).into_outcome()
            }
        }
    };
}

into_remote_fn!();
into_remote_fn!(A1);
into_remote_fn!(A1, A2);
into_remote_fn!(A1, A2, A3);
into_remote_fn!(A1, A2, A3, A4);
into_remote_fn!(A1, A2, A3, A4, A5);
into_remote_fn!(A1, A2, A3, A4, A5, A6);

fn panic_message(p: Box<dyn Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_owned()
    }
}

/// Handle to a registered function with static parameter and result types.
pub struct RemoteFn<Args, R> {
    descriptor: Arc<FunctionDescriptor>,
    invoker: Invoker,
    _sig: PhantomData<fn(Args) -> R>,
}

impl<Args, R> Clone for RemoteFn<Args, R> {
    fn clone(&self) -> Self {
        RemoteFn {
            descriptor: self.descriptor.clone(),
            invoker: self.invoker.clone(),
            _sig: PhantomData,
        }
    }
}

impl<Args, R> fmt::Debug for RemoteFn<Args, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RemoteFn").field(&self.descriptor).finish()
    }
}

impl<Args: ArgList, R: Migratable> RemoteFn<Args, R> {
    pub fn descriptor(&self) -> &Arc<FunctionDescriptor> {
        &self.descriptor
    }

    pub fn name(&self) -> &str {
        self.descriptor.name.as_str()
    }

    /// Serializes `args` now; the closure carries only bytes from here on.
    pub fn make_closure(&self, args: Args) -> TypedClosure<R> {
        let mut bytes = Vec::new();
        args.encode_all(&mut bytes);
        TypedClosure {
            closure: Closure {
                descriptor: self.descriptor.clone(),
                args: bytes,
            },
            _result: PhantomData,
        }
    }

    /// Target-side step: decode `args`, call, encode the result.
    pub fn invoke_decoded(&self, args: &[u8]) -> Result<Vec<u8>, InvokeError> {
        (self.invoker)(args)
    }

    pub fn invoker(&self) -> &Invoker {
        &self.invoker
    }
}

/// A registered function plus its serialized arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Closure {
    descriptor: Arc<FunctionDescriptor>,
    args: Vec<u8>,
}

impl Closure {
    pub fn descriptor(&self) -> &Arc<FunctionDescriptor> {
        &self.descriptor
    }

    pub fn args(&self) -> &[u8] {
        &self.args
    }

    /// Decodes the argument bytes against the descriptor's schema.
    pub fn decode_args(&self) -> Result<Vec<Value>, CodecError> {
        decode_values(&self.descriptor.params, &self.args)
    }
}

/// A [`Closure`] that remembers its result type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedClosure<R> {
    closure: Closure,
    _result: PhantomData<fn() -> R>,
}

impl<R> TypedClosure<R> {
    pub fn closure(&self) -> &Closure {
        &self.closure
    }

    pub fn into_untyped(self) -> Closure {
        self.closure
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClosureError {
    #[error("{name} takes {expected} arguments, got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("argument {index} is not migratable as the declared parameter kind: {source}")]
    NotMigratable { index: usize, source: CodecError },
}

/// Builds a closure from dynamically typed values, checking them against the
/// descriptor's parameter schema.
pub fn make_closure(descriptor: &Arc<FunctionDescriptor>, args: &[Value]) -> Result<Closure, ClosureError> {
    if args.len() != descriptor.params.len() {
        return Err(ClosureError::ArityMismatch {
            name: descriptor.name.to_string(),
            expected: descriptor.params.len(),
            got: args.len(),
        });
    }
    let mut bytes = Vec::new();
    for (index, (kind, value)) in descriptor.params.iter().zip(args).enumerate() {
        kind.encode(value, &mut bytes)
            .map_err(|source| ClosureError::NotMigratable { index, source })?;
    }
    Ok(Closure {
        descriptor: descriptor.clone(),
        args: bytes,
    })
}

/// Builds the active message for one call of `closure`.
pub fn closure_to_message<C>(
    closure: &Closure,
    request_id: u64,
    origin: NodeId,
    registry: &Registry<C>,
) -> Result<ActiveMessage, RegistryError> {
    let key = registry.key_of(closure.descriptor.name.as_str())?;
    let mut header = Vec::with_capacity(REQUEST_HEADER_LEN);
    RequestHeader { request_id, origin }.write(&mut header);
    Ok(ActiveMessage::from_parts(key, &[&header, &closure.args]))
}

fn function_handler<C: CallContext>(name: HandlerName, invoker: Invoker) -> crate::registry::Handler<C> {
    Arc::new(move |ctx: &C, payload: &[u8]| {
        let Some((req, args)) = RequestHeader::split(payload) else {
            log::error!(
                "{name}: request payload of {} bytes has no request header, dropped",
                payload.len()
            );
            return;
        };
        let outcome = ctx.scope(|| invoker(args)).map_err(RemoteError::from);
        ctx.reply(req.origin, req.request_id, outcome);
    })
}

/// Registers a function from its erased invoker and explicit schema.
pub fn register_invoker<C: CallContext + 'static>(
    registry: &mut Registry<C>,
    name: &str,
    params: Vec<CodecKind>,
    result: CodecKind,
    invoker: Invoker,
) -> Result<Arc<FunctionDescriptor>, RegistryError> {
    let name = HandlerName::new(name)?;
    if name.is_internal() {
        return Err(RegistryError::ReservedName(name.to_string()));
    }
    registry.register(name.as_str(), function_handler(name.clone(), invoker))?;
    Ok(Arc::new(FunctionDescriptor {
        name,
        params,
        result,
    }))
}

/// Registers `f` under `name`.
///
/// ```
/// use ham::remote_function::{register_function, CallContext, RemoteError};
/// use ham::{NodeId, Registry};
///
/// struct NoReply;
/// impl CallContext for NoReply {
///     fn reply(&self, _: NodeId, _: u64, _: Result<Vec<u8>, RemoteError>) {}
/// }
///
/// let mut reg = Registry::<NoReply>::new();
/// let square = register_function(&mut reg, "app.square", |x: i64| x * x).unwrap();
/// let out = square.invoke_decoded(&7i64.to_le_bytes()).unwrap();
/// assert_eq!(out, 49i64.to_le_bytes());
/// ```
pub fn register_function<C, Args, R, F>(
    registry: &mut Registry<C>,
    name: &str,
    f: F,
) -> Result<RemoteFn<Args, R>, RegistryError>
where
    C: CallContext + 'static,
    Args: ArgList,
    R: Migratable,
    F: IntoRemoteFn<Args, R>,
{
    let invoker: Invoker = Arc::new(move |bytes: &[u8]| {
        let args = Args::decode_all(bytes)?;
        let result = catch_unwind(AssertUnwindSafe(|| f.call_with(args)))
            .map_err(|p| InvokeError::Failed(panic_message(p)))?
            .map_err(InvokeError::Failed)?;
        Ok(result.to_bytes())
    });
    let descriptor = register_invoker(registry, name, Args::kinds(), R::kind(), invoker.clone())?;
    Ok(RemoteFn {
        descriptor,
        invoker,
        _sig: PhantomData,
    })
}

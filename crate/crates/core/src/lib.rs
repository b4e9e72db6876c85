//! Heterogeneous active messages.
//!
//! Remotely callable functions are registered under explicit, stable names.
//! Every process sorts the collected names byte-wise and uses the rank as the
//! handler key, so all processes agree on the key-to-handler mapping without
//! exchanging anything. Function calls then travel as self-executing active
//! messages: a 16-byte header carrying the key and payload length, followed by
//! the serialized arguments. The receiver indexes its local handler table with
//! the key and runs the handler, which replies through a future on the origin.
//!
//! Layers, bottom-up:
//!
//! * [`registry`]: two-phase name collection and key assignment.
//! * [`messages`]: wire frame, dispatch and execution policies.
//! * [`remote_function`]: codecs, function descriptors and closures.
//! * [`transport`]: loopback and TCP backends moving whole frames.
//! * [`runtime`]: offload API (async calls, remote buffers, terminate).
//! * [`bench`], [`suite`], [`demo`], [`cli`]: executable surface.

// Lets modules shared with other binaries (see `suite`) name this crate as `ham`.
extern crate self as ham;

pub mod bench;
pub mod cli;
pub mod demo;
pub mod messages;
pub mod registry;
pub mod remote_function;
pub mod runtime;
pub mod suite;
pub mod transport;

pub use messages::{ActiveMessage, ExecutionPolicy, MessageHeader};
pub use registry::{HandlerKey, HandlerName, Registry, RegistryError};
pub use remote_function::{
    make_closure, register_function, CodecKind, Closure, FunctionDescriptor, Migratable, RemoteFn,
    TypedClosure, Value,
};
pub use runtime::{
    NodeContext, OffloadError, OffloadFuture, RemoteBufferHandle, Runtime, RuntimeConfig,
    RuntimeError,
};
pub use transport::{NodeId, PeerConfig, Transport, TransportError};

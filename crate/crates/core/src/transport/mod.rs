//! Communication backends.
//!
//! A [`Transport`] moves whole frames (see [`crate::messages`]) between nodes,
//! reliably and in order for every (sender, receiver) pair. Two backends are
//! provided: [`loopback`], which models several nodes inside one process with
//! paired queues, and [`tcp`], a full mesh of TCP connections.
//!
//! Both run a digest handshake when connecting: every node announces the
//! digest of its handler-name set and refuses peers whose digest differs.

mod config;
pub mod loopback;
pub mod tcp;

use std::fmt;
use std::time::Duration;

use thiserror::Error;

pub use config::PeerConfig;
pub use loopback::{LoopbackFabric, LoopbackTransport};
pub use tcp::{TcpOptions, TcpTransport};

/// Identity of one participating process. Node 0 is the conventional host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const HOST: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}", self.0)
    }
}

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("could not connect to {peer}: {reason}")]
    ConnectFailed { peer: NodeId, reason: String },
    #[error("{peer} runs a different handler set (digest {remote:#018x}, ours {local:#018x})")]
    DigestMismatch { peer: NodeId, local: u64, remote: u64 },
    #[error("{0} is gone")]
    PeerGone(NodeId),
    #[error("{0} is not part of this configuration")]
    UnknownPeer(NodeId),
    #[error("frame of {len} bytes exceeds the limit of {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("transport is shut down")]
    Shutdown,
    #[error("invalid peer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TransportError {
    /// True for errors that mean the other side (or this side) is no longer reachable.
    pub fn is_disconnect(&self) -> bool {
        matches!(self, TransportError::PeerGone(_) | TransportError::Shutdown)
    }
}

/// What [`Transport::recv`] yields.
#[derive(Debug, PartialEq, Eq)]
pub enum Incoming {
    Frame { from: NodeId, frame: Vec<u8> },
    /// The connection to this peer ended. No further frames from it follow.
    PeerLost(NodeId),
}

pub trait Transport: Send + Sync {
    fn node(&self) -> NodeId;

    /// Every node in the configuration, this one included, ascending.
    fn nodes(&self) -> Vec<NodeId>;

    /// Queues `frame` for delivery to `to`. Sending to oneself is allowed.
    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError>;

    /// Blocks until a frame or a peer-loss notice arrives. Single consumer.
    fn recv(&self) -> Result<Incoming, TransportError>;

    /// Unblocks `recv` and makes later sends fail. Idempotent.
    fn shutdown(&self);

    fn max_frame(&self) -> usize;
}

/// Checks that `frame` holds exactly one frame within `max` bytes of payload.
pub(crate) fn check_outgoing(frame: &[u8], max_payload: usize) -> Result<(), TransportError> {
    match crate::messages::decode_with_limit(frame, max_payload) {
        Ok(_) => Ok(()),
        Err(crate::messages::FrameError::FrameTooLarge { .. }) => Err(TransportError::FrameTooLarge {
            len: frame.len(),
            max: max_payload + crate::messages::HEADER_LEN,
        }),
        Err(e) => Err(TransportError::MalformedFrame(e.to_string())),
    }
}

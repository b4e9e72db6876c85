//! In-process backend: each node is an endpoint with its own inbox queue.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{check_outgoing, Incoming, NodeId, Transport, TransportError};
use crate::messages::DEFAULT_MAX_PAYLOAD;

/// A plain locked queue. Channel implementations that spin before parking
/// cost more than they save when sender and receiver share a core.
#[derive(Default)]
struct Inbox {
    /// `None` is the owner's own stop marker.
    items: Mutex<VecDeque<Option<Incoming>>>,
    ready: Condvar,
}

impl Inbox {
    fn push(&self, item: Option<Incoming>) {
        self.items.lock().unwrap().push_back(item);
        self.ready.notify_one();
    }

    fn pop(&self) -> Option<Incoming> {
        let mut items = self.items.lock().unwrap();
        loop {
            if let Some(item) = items.pop_front() {
                return item;
            }
            items = self.ready.wait(items).unwrap();
        }
    }
}

struct Slot {
    inbox: Inbox,
    claimed: AtomicBool,
    alive: AtomicBool,
}

struct Fabric {
    slots: Vec<Slot>,
    digests: Mutex<Vec<Option<u64>>>,
    announced: Condvar,
    max_payload: usize,
}

/// A set of loopback nodes `0..n` sharing one process.
#[derive(Clone)]
pub struct LoopbackFabric {
    fabric: Arc<Fabric>,
}

impl LoopbackFabric {
    pub fn new(nodes: usize) -> Self {
        Self::with_max_payload(nodes, DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(nodes: usize, max_payload: usize) -> Self {
        let slots = (0..nodes)
            .map(|_| Slot {
                inbox: Inbox::default(),
                claimed: AtomicBool::new(false),
                alive: AtomicBool::new(true),
            })
            .collect();
        LoopbackFabric {
            fabric: Arc::new(Fabric {
                slots,
                digests: Mutex::new(vec![None; nodes]),
                announced: Condvar::new(),
                max_payload,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.fabric.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fabric.slots.is_empty()
    }

    /// Claims endpoint `node`, announces `digest` and waits until every other
    /// node has announced its own, then compares.
    pub fn connect(&self, node: NodeId, digest: u64, timeout: Duration) -> Result<LoopbackTransport, TransportError> {
        self.claim(node, digest)?;
        let deadline = Instant::now() + timeout;
        let fabric = &self.fabric;
        let mut digests = fabric.digests.lock().unwrap();
        loop {
            if let Some(missing) = digests.iter().position(Option::is_none) {
                let now = Instant::now();
                if now >= deadline {
                    return Err(TransportError::ConnectFailed {
                        peer: NodeId(missing as u64),
                        reason: "peer never connected".into(),
                    });
                }
                digests = fabric.announced.wait_timeout(digests, deadline - now).unwrap().0;
                continue;
            }
            for (peer, remote) in digests.iter().enumerate() {
                let remote = remote.expect("all announced");
                if remote != digest {
                    return Err(TransportError::DigestMismatch {
                        peer: NodeId(peer as u64),
                        local: digest,
                        remote,
                    });
                }
            }
            break;
        }
        drop(digests);
        Ok(LoopbackTransport::new(node, self.fabric.clone()))
    }

    /// Connects every node at once with the same digest.
    pub fn connect_all(&self, digest: u64) -> Result<Vec<LoopbackTransport>, TransportError> {
        for n in 0..self.len() {
            self.claim(NodeId(n as u64), digest)?;
        }
        Ok((0..self.len())
            .map(|n| LoopbackTransport::new(NodeId(n as u64), self.fabric.clone()))
            .collect())
    }

    fn claim(&self, node: NodeId, digest: u64) -> Result<(), TransportError> {
        let slot = self
            .fabric
            .slots
            .get(node.0 as usize)
            .ok_or(TransportError::UnknownPeer(node))?;
        if slot.claimed.swap(true, Ordering::AcqRel) {
            return Err(TransportError::Config(format!("{node} is already connected")));
        }
        self.fabric.digests.lock().unwrap()[node.0 as usize] = Some(digest);
        self.fabric.announced.notify_all();
        Ok(())
    }
}

pub struct LoopbackTransport {
    node: NodeId,
    fabric: Arc<Fabric>,
    closed: AtomicBool,
}

impl LoopbackTransport {
    fn new(node: NodeId, fabric: Arc<Fabric>) -> Self {
        LoopbackTransport {
            node,
            fabric,
            closed: AtomicBool::new(false),
        }
    }
}

impl Transport for LoopbackTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn nodes(&self) -> Vec<NodeId> {
        (0..self.fabric.slots.len() as u64).map(NodeId).collect()
    }

    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Shutdown);
        }
        let slot = self
            .fabric
            .slots
            .get(to.0 as usize)
            .ok_or(TransportError::UnknownPeer(to))?;
        check_outgoing(&frame, self.fabric.max_payload)?;
        if !slot.alive.load(Ordering::Acquire) {
            return Err(TransportError::PeerGone(to));
        }
        slot.inbox.push(Some(Incoming::Frame {
            from: self.node,
            frame,
        }));
        Ok(())
    }

    fn recv(&self) -> Result<Incoming, TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Shutdown);
        }
        self.fabric.slots[self.node.0 as usize]
            .inbox
            .pop()
            .ok_or(TransportError::Shutdown)
    }

    fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let own = &self.fabric.slots[self.node.0 as usize];
        own.alive.store(false, Ordering::Release);
        own.inbox.push(None);
        for (i, slot) in self.fabric.slots.iter().enumerate() {
            if i as u64 != self.node.0 && slot.alive.load(Ordering::Acquire) {
                slot.inbox.push(Some(Incoming::PeerLost(self.node)));
            }
        }
    }

    fn max_frame(&self) -> usize {
        self.fabric.max_payload
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

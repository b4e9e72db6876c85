//! TCP backend: a full mesh where the lower node id dials the higher one.
//!
//! The byte stream carries concatenated frames; the frame header's payload
//! length is the only delimiter. Right after a connection is established the
//! dialer sends its node id and handler digest (16 bytes, LE) and the acceptor
//! answers with its own digest (8 bytes, LE). Either side aborts on mismatch.
//!
//! There are no reader threads: `recv` polls every peer socket plus a wake
//! socket (self-sends, shutdown) and reads the next frame in place.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::fd::AsRawFd;
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{check_outgoing, Incoming, NodeId, PeerConfig, Transport, TransportError, DEFAULT_CONNECT_TIMEOUT};
use crate::messages::{MessageHeader, DEFAULT_MAX_PAYLOAD, HEADER_LEN};

#[derive(Debug, Clone)]
pub struct TcpOptions {
    pub connect_timeout: Duration,
    pub max_payload: usize,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

struct Link {
    writer: Mutex<TcpStream>,
    reader: Mutex<BufReader<TcpStream>>,
    control: TcpStream,
    /// Cleared when a write fails or the stream ends.
    alive: AtomicBool,
    /// Cleared once the stream has ended and the loss was reported.
    reading: AtomicBool,
}

pub struct TcpTransport {
    node: NodeId,
    nodes: Vec<NodeId>,
    links: HashMap<NodeId, Link>,
    peers: Vec<NodeId>,
    cursor: AtomicUsize,
    to_self: Mutex<VecDeque<Vec<u8>>>,
    wake_tx: UnixStream,
    wake_rx: UnixStream,
    closed: AtomicBool,
    max_payload: usize,
}

fn remaining(deadline: Instant) -> Option<Duration> {
    deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{addr} did not resolve")))
}

fn handshake_io(peer: NodeId, e: io::Error) -> TransportError {
    TransportError::ConnectFailed {
        peer,
        reason: format!("handshake failed: {e}"),
    }
}

fn dial(me: NodeId, peer: NodeId, addr: &str, digest: u64, deadline: Instant) -> Result<TcpStream, TransportError> {
    let mut backoff = Duration::from_millis(10);
    let mut stream = loop {
        let attempt = resolve(addr).and_then(|a| {
            let budget = remaining(deadline).unwrap_or(Duration::from_millis(1));
            TcpStream::connect_timeout(&a, budget.min(Duration::from_secs(1)))
        });
        match attempt {
            Ok(s) => break s,
            Err(e) => {
                let Some(left) = remaining(deadline) else {
                    return Err(TransportError::ConnectFailed {
                        peer,
                        reason: format!("{addr}: {e}"),
                    });
                };
                thread::sleep(backoff.min(left));
                backoff = (backoff + Duration::from_millis(10)).min(Duration::from_millis(250));
            }
        }
    };
    let mut hello = [0u8; 16];
    hello[..8].copy_from_slice(&me.0.to_le_bytes());
    hello[8..].copy_from_slice(&digest.to_le_bytes());
    stream.write_all(&hello).map_err(|e| handshake_io(peer, e))?;
    stream
        .set_read_timeout(Some(remaining(deadline).unwrap_or(Duration::from_millis(1))))
        .map_err(|e| handshake_io(peer, e))?;
    let mut reply = [0u8; 8];
    stream.read_exact(&mut reply).map_err(|e| handshake_io(peer, e))?;
    let remote = u64::from_le_bytes(reply);
    if remote != digest {
        return Err(TransportError::DigestMismatch {
            peer,
            local: digest,
            remote,
        });
    }
    Ok(stream)
}

fn accept_peers(
    listener: TcpListener,
    mut expected: BTreeSet<NodeId>,
    digest: u64,
    deadline: Instant,
    abort: Arc<AtomicBool>,
) -> Result<Vec<(NodeId, TcpStream)>, TransportError> {
    listener.set_nonblocking(true)?;
    let mut accepted = Vec::new();
    while let Some(&first_missing) = expected.iter().next() {
        match listener.accept() {
            Ok((mut stream, from)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(remaining(deadline).unwrap_or(Duration::from_millis(1))))?;
                let mut hello = [0u8; 16];
                if let Err(e) = stream.read_exact(&mut hello) {
                    log::warn!("dropping connection from {from}: {e}");
                    continue;
                }
                let peer = NodeId(u64::from_le_bytes(hello[..8].try_into().unwrap()));
                let remote = u64::from_le_bytes(hello[8..].try_into().unwrap());
                if !expected.contains(&peer) {
                    log::warn!("dropping connection from {from}: unexpected {peer}");
                    continue;
                }
                stream.write_all(&digest.to_le_bytes()).map_err(|e| handshake_io(peer, e))?;
                if remote != digest {
                    return Err(TransportError::DigestMismatch {
                        peer,
                        local: digest,
                        remote,
                    });
                }
                expected.remove(&peer);
                accepted.push((peer, stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if abort.load(Ordering::Acquire) {
                    return Err(TransportError::ConnectFailed {
                        peer: first_missing,
                        reason: "connect aborted".into(),
                    });
                }
                if remaining(deadline).is_none() {
                    return Err(TransportError::ConnectFailed {
                        peer: first_missing,
                        reason: "peer never connected".into(),
                    });
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(accepted)
}

impl TcpTransport {
    /// Binds this node's endpoint (if any peer will dial it), dials every
    /// higher node and accepts every lower one.
    pub fn connect(config: &PeerConfig, digest: u64, opts: &TcpOptions) -> Result<Self, TransportError> {
        Self::connect_with_listener(config, None, digest, opts)
    }

    /// Like [`connect`](Self::connect) but with an already bound listener for
    /// this node's endpoint.
    pub fn connect_with_listener(
        config: &PeerConfig,
        listener: Option<TcpListener>,
        digest: u64,
        opts: &TcpOptions,
    ) -> Result<Self, TransportError> {
        let me = config.node;
        let deadline = Instant::now() + opts.connect_timeout;
        let lower: BTreeSet<NodeId> = config.peers.keys().copied().filter(|&n| n < me).collect();
        let higher: Vec<NodeId> = config.peers.keys().copied().filter(|&n| n > me).collect();

        let listener = match listener {
            Some(l) => Some(l),
            None if !lower.is_empty() => {
                let addr = config.endpoint(me).expect("validated config");
                Some(TcpListener::bind(resolve(addr)?)?)
            }
            None => None,
        };
        let abort = Arc::new(AtomicBool::new(false));
        let acceptor = match listener {
            Some(l) if !lower.is_empty() => {
                let abort = abort.clone();
                Some(thread::spawn(move || accept_peers(l, lower, digest, deadline, abort)))
            }
            _ => None,
        };

        let mut streams = Vec::new();
        let mut error = None;
        for peer in higher {
            match dial(me, peer, config.endpoint(peer).expect("listed"), digest, deadline) {
                Ok(s) => streams.push((peer, s)),
                Err(e) => {
                    abort.store(true, Ordering::Release);
                    error = Some(e);
                    break;
                }
            }
        }
        if let Some(acceptor) = acceptor {
            match acceptor.join().expect("acceptor thread panicked") {
                Ok(v) => streams.extend(v),
                // A digest mismatch is the more informative failure.
                Err(e) => match (&error, &e) {
                    (Some(TransportError::DigestMismatch { .. }), _) => {}
                    (_, TransportError::DigestMismatch { .. }) | (None, _) => error = Some(e),
                    _ => {}
                },
            }
        }
        if let Some(e) = error {
            return Err(e);
        }
        Self::from_streams(me, config.peers.keys().copied().collect(), streams, opts.max_payload)
    }

    fn from_streams(
        node: NodeId,
        nodes: Vec<NodeId>,
        streams: Vec<(NodeId, TcpStream)>,
        max_payload: usize,
    ) -> Result<Self, TransportError> {
        let (wake_tx, wake_rx) = UnixStream::pair()?;
        wake_tx.set_nonblocking(true)?;
        wake_rx.set_nonblocking(true)?;
        let mut links = HashMap::new();
        for (peer, stream) in streams {
            stream.set_read_timeout(None)?;
            stream.set_nodelay(true)?;
            let reader = BufReader::with_capacity(1 << 16, stream.try_clone()?);
            let control = stream.try_clone()?;
            links.insert(
                peer,
                Link {
                    writer: Mutex::new(stream),
                    reader: Mutex::new(reader),
                    control,
                    alive: AtomicBool::new(true),
                    reading: AtomicBool::new(true),
                },
            );
        }
        let mut peers: Vec<NodeId> = links.keys().copied().collect();
        peers.sort();
        Ok(TcpTransport {
            node,
            nodes,
            links,
            peers,
            cursor: AtomicUsize::new(0),
            to_self: Mutex::default(),
            wake_tx,
            wake_rx,
            closed: AtomicBool::new(false),
            max_payload,
        })
    }
}

impl Transport for TcpTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.nodes.clone()
    }

    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Shutdown);
        }
        if to != self.node && !self.links.contains_key(&to) {
            return Err(TransportError::UnknownPeer(to));
        }
        check_outgoing(&frame, self.max_payload)?;
        if to == self.node {
            self.to_self.lock().unwrap().push_back(frame);
            self.wake();
            return Ok(());
        }
        let link = &self.links[&to];
        if !link.alive.load(Ordering::Acquire) {
            return Err(TransportError::PeerGone(to));
        }
        let mut writer = link.writer.lock().unwrap();
        writer.write_all(&frame).map_err(|e| {
            link.alive.store(false, Ordering::Release);
            log::debug!("send to {to} failed: {e}");
            TransportError::PeerGone(to)
        })
    }

    fn recv(&self) -> Result<Incoming, TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Shutdown);
        }
        let mut fds = Vec::with_capacity(self.peers.len() + 1);
        loop {
            if self.closed.load(Ordering::Acquire) {
                return Err(TransportError::Shutdown);
            }
            if let Some(frame) = self.to_self.lock().unwrap().pop_front() {
                return Ok(Incoming::Frame { from: self.node, frame });
            }
            // Rotate the starting peer so one busy sender cannot starve the rest.
            let n = self.peers.len();
            let start = if n == 0 { 0 } else { self.cursor.fetch_add(1, Ordering::Relaxed) % n };
            let rotation = (0..n).map(|i| self.peers[(start + i) % n]);
            let open: Vec<NodeId> = rotation.filter(|p| self.links[p].reading.load(Ordering::Acquire)).collect();
            // Bytes already pulled into a reader's buffer are invisible to poll.
            if let Some(&peer) = open.iter().find(|p| !self.links[p].reader.lock().unwrap().buffer().is_empty()) {
                return self.read_frame(peer);
            }
            fds.clear();
            fds.push(pollfd(self.wake_rx.as_raw_fd()));
            fds.extend(open.iter().map(|p| pollfd(self.links[p].control.as_raw_fd())));
            // SAFETY: `fds` is a valid, initialized array of `fds.len()` entries.
            let rc = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, -1) };
            if rc < 0 {
                let e = io::Error::last_os_error();
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(e.into());
            }
            if fds[0].revents != 0 {
                self.drain_wake();
                continue;
            }
            if let Some(i) = fds[1..].iter().position(|f| f.revents != 0) {
                return self.read_frame(open[i]);
            }
        }
    }

    fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        for link in self.links.values() {
            link.alive.store(false, Ordering::Release);
            let _ = link.control.shutdown(Shutdown::Both);
        }
        self.wake();
    }

    fn max_frame(&self) -> usize {
        self.max_payload
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn pollfd(fd: std::os::fd::RawFd) -> libc::pollfd {
    libc::pollfd {
        fd,
        events: libc::POLLIN,
        revents: 0,
    }
}

impl TcpTransport {
    fn wake(&self) {
        // A full socket buffer already guarantees a wakeup.
        let _ = (&self.wake_tx).write(&[1]);
    }

    fn drain_wake(&self) {
        let mut buf = [0u8; 64];
        while matches!((&self.wake_rx).read(&mut buf), Ok(n) if n > 0) {}
    }

    /// Reads one whole frame from `peer`, whose stream is readable.
    fn read_frame(&self, peer: NodeId) -> Result<Incoming, TransportError> {
        let link = &self.links[&peer];
        let mut reader = link.reader.lock().unwrap();
        let mut header = [0u8; HEADER_LEN];
        let mut frame = Vec::new();
        let read = reader.read_exact(&mut header).and_then(|()| {
            let len = MessageHeader::from_bytes(&header).payload_len;
            if len > self.max_payload as u64 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("frame from {peer} declares {len} payload bytes, limit is {}", self.max_payload),
                ));
            }
            frame = vec![0u8; HEADER_LEN + len as usize];
            frame[..HEADER_LEN].copy_from_slice(&header);
            reader.read_exact(&mut frame[HEADER_LEN..])
        });
        match read {
            Ok(()) => Ok(Incoming::Frame { from: peer, frame }),
            Err(e) => {
                link.reading.store(false, Ordering::Release);
                link.alive.store(false, Ordering::Release);
                if e.kind() == io::ErrorKind::InvalidData {
                    Err(TransportError::MalformedFrame(e.to_string()))
                } else if self.closed.load(Ordering::Acquire) {
                    Err(TransportError::Shutdown)
                } else {
                    log::debug!("stream from {peer} ended: {e}");
                    Ok(Incoming::PeerLost(peer))
                }
            }
        }
    }
}

/// Binds `n` listeners on 127.0.0.1 with OS-assigned ports and returns them
/// with the matching configuration for node 0.
pub fn localhost_listeners(n: usize) -> io::Result<(PeerConfig, Vec<TcpListener>)> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<Vec<_>>>()?;
    let peers = listeners
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((NodeId(i as u64), l.local_addr()?.to_string())))
        .collect::<io::Result<_>>()?;
    let config = PeerConfig::new(NodeId(0), peers).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    Ok((config, listeners))
}

#[cfg(test)]
mod tests {
    use super::super::tests as contract;
    use super::*;

    fn mesh(n: usize, digests: &[u64]) -> Vec<Result<TcpTransport, TransportError>> {
        let (config, listeners) = localhost_listeners(n).unwrap();
        let opts = TcpOptions {
            connect_timeout: Duration::from_secs(5),
            ..Default::default()
        };
        thread::scope(|s| {
            let handles: Vec<_> = listeners
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    let cfg = config.with_node(NodeId(i as u64)).unwrap();
                    let opts = opts.clone();
                    let digest = digests[i];
                    s.spawn(move || TcpTransport::connect_with_listener(&cfg, Some(l), digest, &opts))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn contract() {
        let v: Vec<_> = mesh(3, &[1, 1, 1]).into_iter().map(Result::unwrap).collect();
        contract::send_recv_identity(&v[0], &v[1]);
        contract::send_recv_identity(&v[2], &v[0]);
        contract::self_send(&v[1]);
        contract::in_order_delivery(&v[0], &v[1], 10_000);
        contract::rejects_bad_frames(&v[0], &v[1]);
        contract::two_senders(&v[0], &v[1], &v[2], 5_000);
    }

    #[test]
    fn digest_mismatch_names_peer() {
        let v = mesh(2, &[1, 2]);
        assert!(matches!(v[0], Err(TransportError::DigestMismatch { peer: NodeId(1), .. })));
        assert!(matches!(v[1], Err(TransportError::DigestMismatch { peer: NodeId(0), .. })));
    }

    #[test]
    fn unreachable_peer_fails_within_timeout() {
        let (config, listeners) = localhost_listeners(2).unwrap();
        drop(listeners);
        let opts = TcpOptions {
            connect_timeout: Duration::from_millis(300),
            ..Default::default()
        };
        let t0 = Instant::now();
        let err = TcpTransport::connect(&config, 0, &opts).err().unwrap();
        assert!(matches!(err, TransportError::ConnectFailed { peer: NodeId(1), .. }));
        assert!(t0.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn shutdown_and_peer_loss() {
        let mut v: Vec<_> = mesh(2, &[3, 3]).into_iter().map(Result::unwrap).collect();
        let b = v.pop().unwrap();
        let a = Arc::new(v.pop().unwrap());
        contract::shutdown_semantics(a, NodeId(1));
        assert_eq!(b.recv().unwrap(), Incoming::PeerLost(NodeId(0)));
        // Writes may be buffered for a moment before the reset is seen.
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match b.send(NodeId(0), contract::frame(0)) {
                Err(TransportError::PeerGone(NodeId(0))) => break,
                Ok(()) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn oversize_incoming_frame_is_reported() {
        let mut v: Vec<_> = mesh(2, &[0, 0]).into_iter().map(Result::unwrap).collect();
        let b = v.pop().unwrap();
        let a = v.pop().unwrap();
        // Bypass the sender-side check by writing a raw header.
        let header = MessageHeader {
            handler_key: crate::registry::HandlerKey(0),
            payload_len: (DEFAULT_MAX_PAYLOAD + 1) as u64,
        };
        a.links[&NodeId(1)].writer.lock().unwrap().write_all(&header.to_bytes()).unwrap();
        assert!(matches!(b.recv(), Err(TransportError::MalformedFrame(_))));
    }
}

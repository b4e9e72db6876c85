//! Several runtimes inside one process, for tests, benchmarks and demos.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::{new_registry, NodeContext, PendingAudit, Runtime, RuntimeConfig, RuntimeError};
use crate::registry::{Registry, RegistryError};
use crate::transport::tcp::localhost_listeners;
use crate::transport::{LoopbackFabric, NodeId, TcpOptions, TcpTransport, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Loopback,
    Tcp,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Backend::Loopback),
            "tcp" => Ok(Backend::Tcp),
            _ => Err(format!("unknown transport {s:?} (expected loopback or tcp)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Loopback => "loopback",
            Backend::Tcp => "tcp",
        })
    }
}

/// Connects one transport per node, each announcing its own digest.
pub fn connect_local(
    backend: Backend,
    digests: &[u64],
    config: &RuntimeConfig,
) -> Result<Vec<Arc<dyn Transport>>, TransportError> {
    let n = digests.len();
    let results: Vec<Result<Arc<dyn Transport>, TransportError>> = match backend {
        Backend::Loopback => {
            let fabric = LoopbackFabric::with_max_payload(n, config.max_payload);
            thread::scope(|s| {
                let handles: Vec<_> = digests
                    .iter()
                    .enumerate()
                    .map(|(i, &digest)| {
                        let fabric = fabric.clone();
                        s.spawn(move || {
                            fabric
                                .connect(NodeId(i as u64), digest, config.connect_timeout)
                                .map(|t| Arc::new(t) as Arc<dyn Transport>)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        }
        Backend::Tcp => {
            let (peers, listeners) = localhost_listeners(n)?;
            let opts = TcpOptions {
                connect_timeout: config.connect_timeout,
                max_payload: config.max_payload,
            };
            thread::scope(|s| {
                let handles: Vec<_> = listeners
                    .into_iter()
                    .zip(digests)
                    .enumerate()
                    .map(|(i, (listener, &digest))| {
                        let peers = &peers;
                        let opts = &opts;
                        s.spawn(move || {
                            let cfg = peers.with_node(NodeId(i as u64))?;
                            TcpTransport::connect_with_listener(&cfg, Some(listener), digest, opts)
                                .map(|t| Arc::new(t) as Arc<dyn Transport>)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        }
    };
    results.into_iter().collect()
}

/// `n` connected runtimes, each with its receive loop on a background thread.
/// Node 0 is the host.
pub struct LocalCluster {
    runtimes: Vec<Runtime>,
    loops: Vec<Option<JoinHandle<Result<(), RuntimeError>>>>,
}

/// Outcome of [`LocalCluster::finish`].
#[derive(Debug)]
pub struct ClusterReport {
    pub host_audit: PendingAudit,
    /// Receive-loop result of every target, in node order.
    pub targets: Vec<Result<(), RuntimeError>>,
}

impl ClusterReport {
    pub fn is_clean(&self) -> bool {
        self.host_audit.is_clean() && self.targets.iter().all(Result::is_ok)
    }
}

impl LocalCluster {
    /// `build` registers the user functions of each node.
    pub fn start<F>(backend: Backend, nodes: usize, config: RuntimeConfig, build: F) -> Result<Self, RuntimeError>
    where
        F: Fn(NodeId, &mut Registry<NodeContext>) -> Result<(), RegistryError>,
    {
        let mut registries = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let mut registry = new_registry();
            build(NodeId(i as u64), &mut registry)?;
            registry.init()?;
            registries.push(registry);
        }
        let digests = registries
            .iter()
            .map(|r| r.digest())
            .collect::<Result<Vec<_>, _>>()?;
        let transports = connect_local(backend, &digests, &config)?;
        let runtimes = registries
            .into_iter()
            .zip(transports)
            .map(|(r, t)| Runtime::new(r, t, config.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let loops = runtimes.iter().map(|rt| Some(rt.spawn_receive_loop())).collect();
        Ok(LocalCluster { runtimes, loops })
    }

    pub fn host(&self) -> &Runtime {
        &self.runtimes[0]
    }

    pub fn runtime(&self, node: NodeId) -> &Runtime {
        &self.runtimes[node.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.runtimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runtimes.is_empty()
    }

    /// Waits for `node`'s receive loop to end and returns its result.
    ///
    /// # Panics
    /// If that loop was already joined.
    pub fn join_loop(&mut self, node: NodeId) -> Result<(), RuntimeError> {
        self.loops[node.0 as usize]
            .take()
            .expect("receive loop already joined")
            .join()
            .expect("receive loop panicked")
    }

    /// Terminates every target from the host, collects their loop results and
    /// the host's pending-table audit, then shuts the host down.
    pub fn finish(mut self) -> Result<ClusterReport, RuntimeError> {
        let terminated = self.host().terminate_all();
        if terminated.is_err() {
            // Some loop may never see a terminate; do not wait on it forever.
            for rt in &self.runtimes[1..] {
                rt.shutdown();
            }
        }
        let targets = (1..self.loops.len())
            .map(|i| self.loops[i].take().expect("joined once").join().expect("receive loop panicked"))
            .collect();
        let host_audit = self.host().audit();
        self.host().shutdown();
        if let Some(h) = self.loops[0].take() {
            h.join().expect("receive loop panicked")?;
        }
        terminated?;
        Ok(ClusterReport { host_audit, targets })
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for rt in &self.runtimes {
            rt.shutdown();
        }
        for h in self.loops.iter_mut().filter_map(Option::take) {
            let _ = h.join();
        }
    }
}

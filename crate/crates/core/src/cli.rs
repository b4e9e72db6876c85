//! Plumbing shared by the executables: node configuration, connecting,
//! spawning announced child nodes, exit codes.

use std::error::Error;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::registry::Registry;
use crate::runtime::{NodeContext, OffloadError, Runtime, RuntimeConfig, RuntimeError, EXIT_TRANSPORT, EXIT_USAGE};
use crate::transport::{NodeId, PeerConfig, TcpOptions, TcpTransport, TransportError};

/// First stdout line of a node started with `--announce`.
pub const ANNOUNCE_PREFIX: &str = "HAM_LISTENING";

pub fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct NodeArgs {
    /// This process's node id [default: $HAM_NODE_ID]
    #[arg(long)]
    pub node: Option<u64>,
    /// Peer file with one `<node_id> <host>:<port>` per line
    #[arg(long)]
    pub peers: Option<PathBuf>,
    /// Peer list `id=host:port,...` [default: $HAM_PEERS]
    #[arg(long)]
    pub peer_list: Option<String>,
    /// Listen on an OS-assigned localhost port instead of this node's listed
    /// endpoint and print it as the first stdout line
    #[arg(long)]
    pub announce: bool,
}

impl NodeArgs {
    /// True if a multi-process configuration was given.
    pub fn is_configured(&self) -> bool {
        self.peers.is_some() || self.peer_list.is_some() || std::env::var_os("HAM_PEERS").is_some()
    }

    pub fn node_id(&self) -> Result<NodeId, TransportError> {
        if let Some(n) = self.node {
            return Ok(NodeId(n));
        }
        let raw = std::env::var("HAM_NODE_ID")
            .map_err(|_| TransportError::Config("no --node given and HAM_NODE_ID is not set".into()))?;
        raw.trim()
            .parse()
            .map(NodeId)
            .map_err(|_| TransportError::Config(format!("invalid HAM_NODE_ID {raw:?}")))
    }

    pub fn peer_config(&self) -> Result<PeerConfig, TransportError> {
        let node = self.node_id()?;
        if let Some(path) = &self.peers {
            return PeerConfig::from_file(path, node);
        }
        let list = match &self.peer_list {
            Some(list) => list.clone(),
            None => std::env::var("HAM_PEERS")
                .map_err(|_| TransportError::Config("no --peers/--peer-list given and HAM_PEERS is not set".into()))?,
        };
        PeerConfig::parse_peer_list(&list, node)
    }
}

/// Initializes `registry`, connects over TCP and builds the runtime.
pub fn connect_tcp(
    args: &NodeArgs,
    mut registry: Registry<NodeContext>,
    config: RuntimeConfig,
) -> Result<Runtime, RuntimeError> {
    if !registry.is_initialized() {
        registry.init()?;
    }
    let digest = registry.digest()?;
    let mut peers = args.peer_config()?;
    let listener = if args.announce {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(TransportError::from)?;
        let addr = listener.local_addr().map_err(TransportError::from)?;
        peers.peers.insert(peers.node, addr.to_string());
        let mut out = io::stdout().lock();
        writeln!(out, "{ANNOUNCE_PREFIX} {addr}").and_then(|_| out.flush()).map_err(TransportError::from)?;
        Some(listener)
    } else {
        None
    };
    let opts = TcpOptions {
        connect_timeout: config.connect_timeout,
        max_payload: config.max_payload,
    };
    let transport = TcpTransport::connect_with_listener(&peers, listener, digest, &opts)?;
    Runtime::new(registry, Arc::new(transport), config)
}

/// Exit code for an error chain: the first runtime, transport or offload
/// error found decides; anything else is a usage error.
pub fn exit_code_of<'a>(chain: impl IntoIterator<Item = &'a (dyn Error + 'static)>) -> i32 {
    for cause in chain {
        if let Some(e) = cause.downcast_ref::<RuntimeError>() {
            return e.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<TransportError>() {
            return match e {
                TransportError::DigestMismatch { .. } | TransportError::MalformedFrame(_) => crate::runtime::EXIT_PROTOCOL,
                TransportError::Config(_) => EXIT_USAGE,
                _ => EXIT_TRANSPORT,
            };
        }
        if cause.downcast_ref::<OffloadError>().is_some() {
            return EXIT_TRANSPORT;
        }
    }
    1
}

/// Polls `child` until it exits or `timeout` passes.
pub fn wait_timeout(child: &mut Child, timeout: Duration) -> io::Result<Option<ExitStatus>> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(2));
    }
}

/// A child node started with `--announce`.
pub struct Announced {
    pub child: Child,
    pub addr: String,
    stdout: Option<JoinHandle<String>>,
    stderr: Option<JoinHandle<String>>,
}

fn collect(mut r: impl Read + Send + 'static) -> JoinHandle<String> {
    thread::spawn(move || {
        let mut s = String::new();
        let _ = r.read_to_string(&mut s);
        s
    })
}

impl Announced {
    /// Spawns `cmd` with piped output and waits for its announce line.
    pub fn spawn(cmd: &mut Command, timeout: Duration) -> io::Result<Announced> {
        let mut child = cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn()?;
        let stderr = Some(collect(child.stderr.take().expect("piped")));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped"));
        let (tx, rx) = std::sync::mpsc::channel();
        thread::spawn(move || {
            let mut line = String::new();
            let found = loop {
                line.clear();
                match stdout.read_line(&mut line) {
                    Ok(0) | Err(_) => break None,
                    Ok(_) => {
                        if let Some(addr) = line.trim().strip_prefix(ANNOUNCE_PREFIX) {
                            break Some(addr.trim().to_owned());
                        }
                    }
                }
            };
            let rest = collect(stdout);
            let _ = tx.send((found, rest));
        });
        match rx.recv_timeout(timeout) {
            Ok((Some(addr), rest)) => Ok(Announced {
                child,
                addr,
                stdout: Some(rest),
                stderr,
            }),
            Ok((None, _)) | Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                let err = stderr.and_then(|h| h.join().ok()).unwrap_or_default();
                Err(io::Error::other(format!("child did not announce a listening address: {}", err.trim())))
            }
        }
    }

    /// Waits up to `timeout` for the child to exit, killing it otherwise.
    /// Returns the status (`None` if it had to be killed) and its output.
    pub fn finish(mut self, timeout: Duration) -> io::Result<(Option<ExitStatus>, String, String)> {
        let status = wait_timeout(&mut self.child, timeout)?;
        if status.is_none() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        let out = self.stdout.take().and_then(|h| h.join().ok()).unwrap_or_default();
        let err = self.stderr.take().and_then(|h| h.join().ok()).unwrap_or_default();
        Ok((status, out, err))
    }
}

impl Drop for Announced {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Path of a binary that sits next to the running executable.
pub fn sibling_binary(name: &str) -> io::Result<PathBuf> {
    let me = std::env::current_exe()?;
    let dir = me.parent().ok_or_else(|| io::Error::other("executable has no parent directory"))?;
    let path = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
    if path.exists() {
        Ok(path)
    } else {
        Err(io::Error::new(io::ErrorKind::NotFound, format!("{} not found", path.display())))
    }
}

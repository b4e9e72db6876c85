use std::collections::BTreeMap;
use std::path::Path;

use super::{NodeId, TransportError};

/// This node's identity and the endpoint of every node, itself included.
///
/// File format: one `<node_id> <host>:<port>` per line; `#` starts a comment.
/// Environment: `HAM_NODE_ID=<id>` and `HAM_PEERS=<id>=<host>:<port>,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub node: NodeId,
    pub peers: BTreeMap<NodeId, String>,
}

fn check_endpoint(addr: &str) -> Result<(), TransportError> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| TransportError::Config(format!("endpoint {addr:?} lacks a port")))?;
    if host.is_empty() {
        return Err(TransportError::Config(format!("endpoint {addr:?} lacks a host")));
    }
    port.parse::<u16>()
        .map_err(|_| TransportError::Config(format!("invalid port in endpoint {addr:?}")))?;
    Ok(())
}

fn parse_id(s: &str) -> Result<NodeId, TransportError> {
    s.trim()
        .parse::<u64>()
        .map(NodeId)
        .map_err(|_| TransportError::Config(format!("invalid node id {s:?}")))
}

impl PeerConfig {
    pub fn new(node: NodeId, peers: BTreeMap<NodeId, String>) -> Result<Self, TransportError> {
        for addr in peers.values() {
            check_endpoint(addr)?;
        }
        if !peers.contains_key(&node) {
            return Err(TransportError::Config(format!("{node} has no endpoint")));
        }
        Ok(PeerConfig { node, peers })
    }

    fn insert(peers: &mut BTreeMap<NodeId, String>, id: NodeId, addr: &str) -> Result<(), TransportError> {
        check_endpoint(addr)?;
        if peers.insert(id, addr.to_owned()).is_some() {
            return Err(TransportError::Config(format!("{id} listed twice")));
        }
        Ok(())
    }

    /// Parses the line-oriented file format.
    pub fn parse(text: &str, node: NodeId) -> Result<Self, TransportError> {
        let mut peers = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(id), Some(addr), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(TransportError::Config(format!(
                    "line {}: expected `<node_id> <host>:<port>`",
                    lineno + 1
                )));
            };
            Self::insert(&mut peers, parse_id(id)?, addr)?;
        }
        Self::new(node, peers)
    }

    pub fn from_file(path: impl AsRef<Path>, node: NodeId) -> Result<Self, TransportError> {
        Self::parse(&std::fs::read_to_string(path)?, node)
    }

    /// Parses the `HAM_PEERS` list format: `0=host:port,1=host:port`.
    pub fn parse_peer_list(list: &str, node: NodeId) -> Result<Self, TransportError> {
        let mut peers = BTreeMap::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (id, addr) = item
                .split_once('=')
                .ok_or_else(|| TransportError::Config(format!("expected id=host:port, got {item:?}")))?;
            Self::insert(&mut peers, parse_id(id)?, addr.trim())?;
        }
        Self::new(node, peers)
    }

    /// Reads `HAM_NODE_ID` and `HAM_PEERS`.
    pub fn from_env() -> Result<Self, TransportError> {
        let node = std::env::var("HAM_NODE_ID")
            .map_err(|_| TransportError::Config("HAM_NODE_ID is not set".into()))?;
        let peers = std::env::var("HAM_PEERS")
            .map_err(|_| TransportError::Config("HAM_PEERS is not set".into()))?;
        Self::parse_peer_list(&peers, parse_id(&node)?)
    }

    /// Renders the `HAM_PEERS` list format.
    pub fn to_peer_list(&self) -> String {
        self.peers
            .iter()
            .map(|(id, addr)| format!("{}={addr}", id.0))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn with_node(&self, node: NodeId) -> Result<Self, TransportError> {
        Self::new(node, self.peers.clone())
    }

    pub fn endpoint(&self, node: NodeId) -> Option<&str> {
        self.peers.get(&node).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_file_format() {
        let text = "# cluster\n0 127.0.0.1:4000\n\n1 localhost:4001  # target\n";
        let cfg = PeerConfig::parse(text, NodeId(1)).unwrap();
        assert_eq!(cfg.node, NodeId(1));
        assert_eq!(cfg.endpoint(NodeId(0)), Some("127.0.0.1:4000"));
        assert_eq!(cfg.endpoint(NodeId(1)), Some("localhost:4001"));
        assert_eq!(cfg.to_peer_list(), "0=127.0.0.1:4000,1=localhost:4001");
    }

    #[test]
    fn parse_env_format() {
        let cfg = PeerConfig::parse_peer_list("0=127.0.0.1:5000, 1=127.0.0.1:5001", NodeId(0)).unwrap();
        assert_eq!(cfg.peers.len(), 2);
        assert_eq!(PeerConfig::parse_peer_list(&cfg.to_peer_list(), NodeId(0)).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PeerConfig::parse("0 127.0.0.1\n", NodeId(0)).is_err());
        assert!(PeerConfig::parse("x 127.0.0.1:1\n", NodeId(0)).is_err());
        assert!(PeerConfig::parse("0 127.0.0.1:99999\n", NodeId(0)).is_err());
        assert!(PeerConfig::parse("0 a:1 extra\n", NodeId(0)).is_err());
        assert!(PeerConfig::parse("0 a:1\n0 b:2\n", NodeId(0)).is_err());
        // Self must be listed.
        assert!(PeerConfig::parse("0 a:1\n", NodeId(1)).is_err());
        assert!(PeerConfig::parse_peer_list("0:a:1", NodeId(0)).is_err());
    }
}

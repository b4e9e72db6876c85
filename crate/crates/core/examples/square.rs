use std::sync::Mutex;

use ham::remote_function::register_function;
use ham::runtime::cluster::{Backend, LocalCluster};
use ham::runtime::RuntimeConfig;
use ham::NodeId;

fn square(x: i64) -> i64 {
    x * x
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Every node registers the same names; the host keeps its typed handle.
    let handle = Mutex::new(None);
    let cluster = LocalCluster::start(Backend::Loopback, 2, RuntimeConfig::default(), |node, reg| {
        let f = register_function(reg, "app.square", square as fn(i64) -> i64)?;
        if node == NodeId::HOST {
            *handle.lock().unwrap() = Some(f);
        }
        Ok(())
    })?;
    let square = handle.into_inner().unwrap().unwrap();
    let rt = cluster.host();
    let y = rt.sync_offload(NodeId(1), &square.make_closure((7,)))?;
    assert_eq!(y, 49);
    let pending = rt.async_offload(NodeId(1), &square.make_closure((8,)))?;
    assert_eq!(pending.get()?, 64);
    cluster.finish()?;
    Ok(())
}

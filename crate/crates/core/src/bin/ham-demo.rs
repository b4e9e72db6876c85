use std::process::exit;
use std::sync::Mutex;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ham::cli;
use ham::demo::demo_inner_prod;
use ham::runtime::cluster::{Backend, LocalCluster};
use ham::runtime::RuntimeConfig;
use ham::suite::{self, Order};
use ham::NodeId;

#[derive(Parser, Debug)]
#[command(name = "ham-demo", version, about = "Offload examples on a local two-node setup")]
struct Args {
    #[command(subcommand)]
    command: Demo,
}

#[derive(Subcommand, Debug)]
enum Demo {
    /// Inner product of two seeded random vectors, computed on node 1
    InnerProd {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "loopback")]
        transport: Backend,
    },
}

fn run(args: Args) -> Result<i32> {
    let Demo::InnerProd { n, seed, transport } = args.command;
    let slot = Mutex::new(None);
    let cluster = LocalCluster::start(transport, 2, RuntimeConfig::from_env()?, |node, reg| {
        let s = suite::register(reg, Order::Forward)?;
        if node == NodeId::HOST {
            *slot.lock().unwrap() = Some(s);
        }
        Ok(())
    })?;
    let suite = slot.into_inner().unwrap().expect("host registered");
    let r = demo_inner_prod(cluster.host(), &suite, NodeId(1), n, seed)?;
    println!("remote: {:?}", r.remote);
    println!("local:  {:?}", r.local);
    println!("bit-identical: {}", r.exact());
    let report = cluster.finish()?;
    Ok(if r.exact() && report.is_clean() { 0 } else { 1 })
}

fn main() {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("ham-demo: {e:#}");
            exit(cli::exit_code_of(e.chain()));
        }
    }
}

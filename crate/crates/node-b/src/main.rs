//! A node built separately from `ham-bench`: it compiles its own copy of the
//! application functions with different optimization settings and registers
//! them in reverse order.

use std::process::exit;

use anyhow::Result;
use clap::{Parser, ValueEnum};

use ham::cli::{self, NodeArgs};
use ham::runtime::{new_registry, RuntimeConfig};

#[path = "../../core/src/suite.rs"]
#[allow(dead_code)]
mod suite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Serve requests until terminated
    Serve,
    /// Print the handler table and exit
    DumpTable,
}

#[derive(Parser, Debug)]
#[command(name = "ham-node-b", version)]
struct Args {
    #[arg(long, value_enum, default_value = "serve")]
    mode: Mode,
    #[command(flatten)]
    node: NodeArgs,
    /// Register one handler the other binaries do not have
    #[arg(long)]
    extra_handler: bool,
}

fn run(args: Args) -> Result<()> {
    let mut reg = new_registry();
    if args.extra_handler {
        suite::register_extra(&mut reg)?;
    }
    suite::register(&mut reg, suite::Order::Reversed)?;
    if args.mode == Mode::DumpTable {
        reg.init()?;
        print!("{}", reg.dump_table()?);
        return Ok(());
    }
    let rt = cli::connect_tcp(&args.node, reg, RuntimeConfig::from_env()?)?;
    rt.run_receive_loop()?;
    Ok(())
}

fn main() {
    cli::init_logging();
    if let Err(e) = run(Args::parse()) {
        eprintln!("ham-node-b: {e:#}");
        exit(cli::exit_code_of(e.chain()));
    }
}

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::{exit, Command};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};

use ham::bench::{bench_bandwidth, bench_empty_offload, raw_pingpong, BenchConfig, BenchResult};
use ham::cli::{self, Announced, NodeArgs};
use ham::runtime::cluster::{Backend, LocalCluster};
use ham::runtime::{new_registry, NodeContext, Runtime, RuntimeConfig};
use ham::suite::{self, Order, Suite};
use ham::{NodeId, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    EmptyOffload,
    Bandwidth,
    InnerProd,
    DumpTable,
    RpcSuite,
    /// Act as a target: serve requests until terminated
    Serve,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Forward,
    Reversed,
}

/// Offload benchmarks and checks. Without a peer configuration, a two-node
/// setup is created locally: in-process for loopback, a spawned child
/// process for tcp.
#[derive(Parser, Debug)]
#[command(name = "ham-bench", version)]
struct Args {
    #[arg(long, value_enum, default_value = "empty-offload")]
    mode: Mode,
    /// Measured repetitions [default: 10000 for empty-offload, 100 for bandwidth]
    #[arg(long)]
    reps: Option<usize>,
    /// Warmup repetitions, excluded from statistics [default: reps / 10]
    #[arg(long)]
    warmup: Option<usize>,
    /// Bytes per put/get in bandwidth mode
    #[arg(long, default_value_t = 1 << 20)]
    payload: usize,
    #[arg(long, default_value = "loopback")]
    transport: Backend,
    #[command(flatten)]
    node: NodeArgs,
    /// Write per-repetition latencies as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also measure a raw ping-pong over the same transport
    #[arg(long)]
    baseline: bool,
    /// Calls in rpc-suite mode
    #[arg(long, default_value_t = 100)]
    calls: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Vector length in inner-prod mode
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Registration order of the application functions
    #[arg(long, value_enum, default_value = "forward")]
    order: OrderArg,
}

fn registry(order: OrderArg) -> Result<(Registry<NodeContext>, Suite)> {
    let mut reg = new_registry();
    let order = match order {
        OrderArg::Forward => Order::Forward,
        OrderArg::Reversed => Order::Reversed,
    };
    let suite = suite::register(&mut reg, order)?;
    Ok((reg, suite))
}

fn report(args: &Args, result: &BenchResult) -> Result<()> {
    println!("{}", result.summary_line());
    if let Some(path) = &args.csv {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        result.write_csv(BufWriter::new(file))?;
    }
    Ok(())
}

/// Runs the selected mode against node 1. Returns the process exit code.
fn drive(args: &Args, rt: &Runtime, suite: &Suite, transport: Backend) -> Result<i32> {
    let target = NodeId(1);
    let name = transport.to_string();
    let bench_cfg = |default_reps: usize| {
        let mut cfg = BenchConfig::new(args.reps.unwrap_or(default_reps), args.payload);
        if let Some(w) = args.warmup {
            cfg.warmup = w;
        }
        cfg
    };
    match args.mode {
        Mode::EmptyOffload => {
            let cfg = bench_cfg(10_000);
            let result = bench_empty_offload(rt, &suite.empty, target, &name, &cfg)?;
            report(args, &result)?;
            if args.baseline {
                let raw = raw_pingpong(transport, &cfg)?;
                println!("{}", raw.summary_line());
                println!(
                    "overhead median_ratio={:.2}",
                    result.stats.median as f64 / raw.stats.median as f64
                );
            }
        }
        Mode::Bandwidth => {
            let result = bench_bandwidth(rt, target, &name, &bench_cfg(100))?;
            report(args, &result)?;
        }
        Mode::InnerProd => {
            let r = ham::demo::demo_inner_prod(rt, suite, target, args.n, args.seed)?;
            println!("inner-prod n={} remote={:?} local={:?} exact={}", r.n, r.remote, r.local, r.exact());
            if !r.exact() {
                return Ok(1);
            }
        }
        Mode::RpcSuite => {
            let r = suite::run_rpc_suite(rt, suite, target, args.calls, args.seed)?;
            let uncovered = r.uncovered(rt.registry());
            for m in &r.mismatches {
                println!("mismatch: {m}");
            }
            println!(
                "rpc-suite calls={} mismatches={} uncovered={:?} digest={:#018x}",
                r.calls,
                r.mismatches.len(),
                uncovered,
                r.result_digest
            );
            if !r.passed() || !uncovered.is_empty() {
                return Ok(1);
            }
        }
        Mode::DumpTable | Mode::Serve => unreachable!("handled before connecting"),
    }
    Ok(0)
}

fn print_audit(rt: &Runtime) -> bool {
    let a = rt.audit();
    println!(
        "pending audit: outstanding={} orphaned={} unmatched={}",
        a.outstanding, a.orphaned, a.unmatched
    );
    a.is_clean()
}

/// Host side of a multi-process run; `rt` is node 0 without a receive loop yet.
fn host(args: &Args, rt: Runtime, suite: &Suite, transport: Backend) -> Result<i32> {
    let receiver = rt.spawn_receive_loop();
    let outcome = drive(args, &rt, suite, transport);
    let terminated = rt.terminate_all();
    let clean = print_audit(&rt);
    rt.shutdown();
    receiver.join().expect("receive loop panicked")?;
    let code = outcome?;
    terminated?;
    Ok(if clean { code } else { 1 })
}

fn run(args: Args) -> Result<i32> {
    let (reg, suite) = registry(args.order)?;
    let config = RuntimeConfig::from_env()?;

    if args.mode == Mode::DumpTable {
        let mut reg = reg;
        reg.init()?;
        print!("{}", reg.dump_table()?);
        return Ok(0);
    }

    if args.node.is_configured() || args.node.announce {
        let rt = cli::connect_tcp(&args.node, reg, config)?;
        if rt.node() != NodeId::HOST || args.mode == Mode::Serve {
            rt.run_receive_loop()?;
            return Ok(0);
        }
        return host(&args, rt, &suite, Backend::Tcp);
    }
    if args.mode == Mode::Serve {
        bail!("serve mode needs a peer configuration (--peers, --peer-list or HAM_PEERS)");
    }

    match args.transport {
        Backend::Loopback => {
            let slot = Mutex::new(Some(reg));
            let cluster = LocalCluster::start(Backend::Loopback, 2, config, |node, r| {
                if node == NodeId::HOST {
                    // The host keeps the registry whose function handles `suite` refers to.
                    *r = slot.lock().unwrap().take().expect("host registry");
                    Ok(())
                } else {
                    suite::register(r, Order::Forward).map(drop)
                }
            })?;
            let outcome = drive(&args, cluster.host(), &suite, Backend::Loopback);
            let report = cluster.finish()?;
            let a = report.host_audit;
            println!(
                "pending audit: outstanding={} orphaned={} unmatched={}",
                a.outstanding, a.orphaned, a.unmatched
            );
            let code = outcome?;
            Ok(if report.is_clean() { code } else { 1 })
        }
        Backend::Tcp => {
            let me = std::env::current_exe()?;
            let child = Announced::spawn(
                Command::new(me).args([
                    "--mode",
                    "serve",
                    "--node",
                    "1",
                    "--peer-list",
                    "0=127.0.0.1:0,1=127.0.0.1:0",
                    "--announce",
                ]),
                Duration::from_secs(10),
            )?;
            let node = NodeArgs {
                node: Some(0),
                peer_list: Some(format!("0=127.0.0.1:0,1={}", child.addr)),
                ..Default::default()
            };
            let rt = cli::connect_tcp(&node, reg, config)?;
            let code = host(&args, rt, &suite, Backend::Tcp);
            let (status, _, err) = child.finish(Duration::from_secs(5))?;
            if !status.is_some_and(|s| s.success()) {
                eprint!("{err}");
                bail!("target process ended with {status:?}");
            }
            code
        }
    }
}

fn main() {
    cli::init_logging();
    let args = Args::parse();
    match run(args) {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("ham-bench: {e:#}");
            exit(cli::exit_code_of(e.chain()));
        }
    }
}

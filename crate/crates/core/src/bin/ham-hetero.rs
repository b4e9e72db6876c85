use std::path::PathBuf;
use std::process::{exit, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Parser;

use ham::cli::{self, Announced};
use ham::runtime::{EXIT_OK, EXIT_PROTOCOL};

/// Runs the mixed RPC suite between two separately built binaries over
/// localhost TCP: `ham-bench` as node 0 and `ham-node-b` (reversed
/// registration order, different optimization level) as node 1.
#[derive(Parser, Debug)]
#[command(name = "ham-hetero", version)]
struct Args {
    /// Give node 1 one extra handler and expect both sides to refuse the
    /// connection with the protocol exit code
    #[arg(long)]
    negative: bool,
    /// Use ham-bench for node 1 as well
    #[arg(long, conflicts_with = "negative")]
    homogeneous: bool,
    #[arg(long, default_value_t = 100)]
    calls: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overall time budget in seconds
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Path of the node 0 binary [default: ham-bench next to this executable]
    #[arg(long)]
    bench_bin: Option<PathBuf>,
    /// Path of the node 1 binary [default: ham-node-b next to this executable]
    #[arg(long)]
    node_b_bin: Option<PathBuf>,
}

fn binary(given: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p.clone()),
        None => cli::sibling_binary(name).with_context(|| format!("locating {name}")),
    }
}

fn run(args: Args) -> Result<bool> {
    let bench = binary(&args.bench_bin, "ham-bench")?;
    let target_bin = if args.homogeneous {
        bench.clone()
    } else {
        binary(&args.node_b_bin, "ham-node-b")?
    };
    let budget = Duration::from_secs(args.timeout);
    let t0 = Instant::now();

    let mut target_cmd = Command::new(&target_bin);
    target_cmd.args(["--mode", "serve", "--node", "1", "--peer-list", "0=127.0.0.1:0,1=127.0.0.1:0", "--announce"]);
    if args.negative {
        target_cmd.arg("--extra-handler");
    }
    let target = Announced::spawn(&mut target_cmd, budget)?;
    let peers = format!("0=127.0.0.1:0,1={}", target.addr);

    let host = Command::new(&bench)
        .args(["--mode", "rpc-suite", "--calls", &args.calls.to_string(), "--seed", &args.seed.to_string()])
        .env("HAM_NODE_ID", "0")
        .env("HAM_PEERS", &peers)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .context("spawning node 0")?;
    let host_out = {
        let remaining = budget.saturating_sub(t0.elapsed());
        let mut host = host;
        let status = cli::wait_timeout(&mut host, remaining)?;
        if status.is_none() {
            let _ = host.kill();
        }
        let out = host.wait_with_output()?;
        (status, out)
    };
    let (target_status, target_stdout, target_stderr) = target.finish(budget.saturating_sub(t0.elapsed()))?;
    let (host_status, host_output) = host_out;

    print!("{}", String::from_utf8_lossy(&host_output.stdout));
    eprint!("{}", String::from_utf8_lossy(&host_output.stderr));
    print!("{target_stdout}");
    eprint!("{target_stderr}");

    let expected = if args.negative { EXIT_PROTOCOL } else { EXIT_OK };
    let code = |s: Option<std::process::ExitStatus>| s.and_then(|s| s.code());
    let (host_code, target_code) = (code(host_status), code(target_status));
    let ok = host_code == Some(expected) && target_code == Some(expected);
    println!(
        "{} node0={} node1={} exit codes {:?}/{:?} (expected {expected}) in {:.2}s",
        if ok { "PASS" } else { "FAIL" },
        bench.display(),
        target_bin.display(),
        host_code,
        target_code,
        t0.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn main() {
    cli::init_logging();
    match run(Args::parse()) {
        Ok(true) => exit(0),
        Ok(false) => exit(1),
        Err(e) => {
            eprintln!("ham-hetero: {e:#}");
            exit(1);
        }
    }
}

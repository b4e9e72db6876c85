//! Latency and bandwidth measurements, plus raw transport baselines measured
//! the same way.
//!
//! All timings use the monotonic clock. Warmup repetitions run first and are
//! excluded from every statistic.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crate::messages::encode;
use crate::registry::HandlerKey;
use crate::remote_function::RemoteFn;
use crate::runtime::cluster::Backend;
use crate::runtime::{OffloadError, Runtime};
use crate::transport::{Incoming, LoopbackFabric, NodeId, Transport, TransportError};

/// Order statistics over post-warmup samples, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub min: u64,
    pub median: u64,
    pub mean: f64,
    pub p99: u64,
}

impl Stats {
    /// `None` for an empty sample. The median of an even count is the lower
    /// middle element; p99 is the nearest-rank percentile.
    pub fn from_samples(samples: &[u64]) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Stats {
            count: n,
            min: sorted[0],
            median: sorted[(n - 1) / 2],
            mean: sorted.iter().map(|&x| x as f64).sum::<f64>() / n as f64,
            p99: rank(0.99),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub payload: usize,
}

impl BenchConfig {
    /// Warmup defaults to a tenth of the measured repetitions.
    pub fn new(reps: usize, payload: usize) -> Self {
        BenchConfig {
            reps: reps.max(1),
            warmup: reps / 10,
            payload,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub mode: String,
    pub transport: String,
    /// Post-warmup samples in repetition order.
    pub latencies_ns: Vec<u64>,
    pub stats: Stats,
    pub payload: usize,
    /// Bytes moved per second over all measured repetitions, in MB/s (10^6).
    pub throughput_mb_s: Option<f64>,
}

impl BenchResult {
    fn new(mode: &str, transport: &str, latencies_ns: Vec<u64>, payload: usize) -> Self {
        let stats = Stats::from_samples(&latencies_ns).expect("at least one repetition");
        BenchResult {
            mode: mode.to_owned(),
            transport: transport.to_owned(),
            latencies_ns,
            stats,
            payload,
            throughput_mb_s: None,
        }
    }

    pub fn summary_line(&self) -> String {
        let s = &self.stats;
        let mut line = format!(
            "summary mode={} transport={} reps={} min_ns={} median_ns={} mean_ns={:.0} p99_ns={}",
            self.mode, self.transport, s.count, s.min, s.median, s.mean, s.p99
        );
        if let Some(t) = self.throughput_mb_s {
            line.push_str(&format!(" payload={} throughput_mb_s={t:.1}", self.payload));
        }
        line
    }

    /// `mode,transport,rep,latency_ns` rows followed by the summary as a
    /// `#` comment line.
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "mode,transport,rep,latency_ns")?;
        for (rep, ns) in self.latencies_ns.iter().enumerate() {
            writeln!(out, "{},{},{rep},{ns}", self.mode, self.transport)?;
        }
        writeln!(out, "# {}", self.summary_line())
    }
}

fn time_reps(cfg: &BenchConfig, mut once: impl FnMut() -> Result<(), OffloadError>) -> Result<Vec<u64>, OffloadError> {
    for _ in 0..cfg.warmup {
        once()?;
    }
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        once()?;
        samples.push(t0.elapsed().as_nanos() as u64);
    }
    Ok(samples)
}

/// Synchronous offloads of a no-argument, no-result function.
pub fn bench_empty_offload(
    rt: &Runtime,
    empty: &RemoteFn<(), ()>,
    target: NodeId,
    transport: &str,
    cfg: &BenchConfig,
) -> Result<BenchResult, OffloadError> {
    let closure = empty.make_closure(());
    let samples = time_reps(cfg, || rt.sync_offload(target, &closure))?;
    Ok(BenchResult::new("empty-offload", transport, samples, 0))
}

/// One put followed by one get of `cfg.payload` bytes per repetition.
pub fn bench_bandwidth(rt: &Runtime, target: NodeId, transport: &str, cfg: &BenchConfig) -> Result<BenchResult, OffloadError> {
    let data: Vec<u8> = (0..cfg.payload).map(|i| i as u8).collect();
    let handle = rt.allocate(target, cfg.payload as u64, 1)?;
    let samples = time_reps(cfg, || {
        rt.put(&data, &handle)?.get()?;
        let back = rt.get(&handle)?;
        debug_assert_eq!(back.len(), data.len());
        Ok(())
    });
    rt.free(&handle)?;
    let samples = samples?;
    let mut result = BenchResult::new("bandwidth", transport, samples, cfg.payload);
    let total_ns: u64 = result.latencies_ns.iter().sum();
    let bytes = 2.0 * cfg.payload as f64 * result.latencies_ns.len() as f64;
    result.throughput_mb_s = Some(if total_ns == 0 { 0.0 } else { bytes / total_ns as f64 * 1e3 });
    Ok(result)
}

/// Round trips of one small frame between two loopback endpoints, echoed by
/// a plain thread: the transport cost without any runtime around it.
pub fn loopback_pingpong(cfg: &BenchConfig) -> Result<BenchResult, TransportError> {
    let mut ends = LoopbackFabric::new(2).connect_all(0)?;
    let echo = ends.pop().unwrap();
    let host = ends.pop().unwrap();
    let echoer = thread::spawn(move || {
        while let Ok(Incoming::Frame { from, frame }) = echo.recv() {
            if echo.send(from, frame).is_err() {
                break;
            }
        }
    });
    let frame = encode(HandlerKey(0), &[0u8; 16]);
    let once = || -> Result<(), TransportError> {
        host.send(NodeId(1), frame.clone())?;
        match host.recv()? {
            Incoming::Frame { .. } => Ok(()),
            Incoming::PeerLost(n) => Err(TransportError::PeerGone(n)),
        }
    };
    let mut samples = Vec::with_capacity(cfg.reps);
    for i in 0..cfg.warmup + cfg.reps {
        let t0 = Instant::now();
        once()?;
        if i >= cfg.warmup {
            samples.push(t0.elapsed().as_nanos() as u64);
        }
    }
    host.shutdown();
    let _ = echoer.join();
    Ok(BenchResult::new("raw-pingpong", "loopback", samples, 0))
}

/// Round trips of a 32-byte message over a localhost TCP connection, echoed
/// by a plain thread.
pub fn tcp_pingpong(cfg: &BenchConfig) -> io::Result<BenchResult> {
    const MSG: usize = 32;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let echoer = thread::spawn(move || -> io::Result<()> {
        let (mut s, _) = listener.accept()?;
        s.set_nodelay(true)?;
        let mut buf = [0u8; MSG];
        while s.read_exact(&mut buf).is_ok() {
            s.write_all(&buf)?;
        }
        Ok(())
    });
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    let out = [7u8; MSG];
    let mut back = [0u8; MSG];
    let mut samples = Vec::with_capacity(cfg.reps);
    for i in 0..cfg.warmup + cfg.reps {
        let t0 = Instant::now();
        s.write_all(&out)?;
        s.read_exact(&mut back)?;
        if i >= cfg.warmup {
            samples.push(t0.elapsed().as_nanos() as u64);
        }
    }
    drop(s);
    let _ = echoer.join();
    Ok(BenchResult::new("raw-pingpong", "tcp", samples, 0))
}

/// The raw baseline for `backend`.
pub fn raw_pingpong(backend: Backend, cfg: &BenchConfig) -> io::Result<BenchResult> {
    match backend {
        Backend::Loopback => loopback_pingpong(cfg).map_err(io::Error::other),
        Backend::Tcp => tcp_pingpong(cfg),
    }
}

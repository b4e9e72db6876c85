//! Application functions shared by the executables, and the mixed RPC suite
//! that checks every one of them against a local oracle.
//!
//! This file is also compiled into the `ham-node-b` binary, so it refers to
//! the library only through `ham::` paths.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ham::remote_function::{register_function, Migratable, RemoteFn};
use ham::runtime::{f64_bytes, local, LocalError, NodeContext, OffloadError, RemoteBufferHandle, Runtime};
use ham::{NodeId, Registry, RegistryError};

pub const EMPTY: &str = "app.empty";
pub const SQUARE: &str = "app.square";
pub const ADD: &str = "app.add";
pub const AXPB: &str = "app.axpb";
pub const CHECKSUM: &str = "app.checksum";
pub const REVERSE: &str = "app.reverse";
pub const SCALE3: &str = "app.scale3";
pub const MIXED: &str = "app.mixed";
pub const INNER_PROD: &str = "app.inner_prod";
pub const FILL: &str = "app.fill";
pub const FAIL: &str = "app.fail";
/// Registered only by the deliberately mismatched variant.
pub const EXTRA: &str = "app.extra";

/// Every user function the suite registers, in source order.
pub const NAMES: [&str; 11] = [
    EMPTY, SQUARE, ADD, AXPB, CHECKSUM, REVERSE, SCALE3, MIXED, INNER_PROD, FILL, FAIL,
];

pub fn empty() {}

pub fn square(x: i64) -> i64 {
    x.wrapping_mul(x)
}

pub fn add(a: i32, b: i32) -> i32 {
    a.wrapping_add(b)
}

pub fn axpb(a: f64, x: f64, b: f64) -> f64 {
    a * x + b
}

pub fn fnv1a(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn checksum(data: Vec<u8>) -> u64 {
    fnv1a(&data)
}

pub fn reverse(s: String) -> String {
    s.chars().rev().collect()
}

pub fn scale3(v: [f32; 3], k: f32) -> [f32; 3] {
    v.map(|x| x * k)
}

pub fn mixed(a: i8, b: u16, c: i32, d: u64, e: f32) -> i64 {
    (a as i64) * (b as i64) - c as i64 + (d >> 32) as i64 + e as i64
}

/// Sum of `a[i] * b[i]` for `i < n`, accumulated in index order.
pub fn dot(a: &[f64], b: &[f64], n: usize) -> f64 {
    a.iter().zip(b).take(n).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn inner_prod(a: RemoteBufferHandle, b: RemoteBufferHandle, n: u64) -> Result<f64, LocalError> {
    let (a, b) = (local::read_f64(&a)?, local::read_f64(&b)?);
    Ok(dot(&a, &b, n as usize))
}

pub fn fill_pattern(len: u64, seed: u64) -> Vec<u8> {
    (0..len).map(|i| (i.wrapping_mul(31).wrapping_add(seed) >> 3) as u8).collect()
}

pub fn fill(h: RemoteBufferHandle, seed: u64) -> Result<(), LocalError> {
    local::write(&h, &fill_pattern(h.byte_len(), seed))
}

pub fn fail(x: u32) -> Result<u32, String> {
    if x % 2 == 1 {
        Err(format!("odd input {x}"))
    } else {
        Ok(x / 2)
    }
}

fn extra() -> u8 {
    1
}

/// Order in which [`register`] adds the functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Forward,
    Reversed,
}

pub struct Suite {
    pub empty: RemoteFn<(), ()>,
    pub square: RemoteFn<(i64,), i64>,
    pub add: RemoteFn<(i32, i32), i32>,
    pub axpb: RemoteFn<(f64, f64, f64), f64>,
    pub checksum: RemoteFn<(Vec<u8>,), u64>,
    pub reverse: RemoteFn<(String,), String>,
    pub scale3: RemoteFn<([f32; 3], f32), [f32; 3]>,
    pub mixed: RemoteFn<(i8, u16, i32, u64, f32), i64>,
    pub inner_prod: RemoteFn<(RemoteBufferHandle, RemoteBufferHandle, u64), f64>,
    pub fill: RemoteFn<(RemoteBufferHandle, u64), ()>,
    pub fail: RemoteFn<(u32,), u32>,
}

pub fn register(reg: &mut Registry<NodeContext>, order: Order) -> Result<Suite, RegistryError> {
    let r = reg;
    Ok(match order {
        Order::Forward => {
            let empty = register_function(r, EMPTY, empty)?;
            let square = register_function(r, SQUARE, square)?;
            let add = register_function(r, ADD, add)?;
            let axpb = register_function(r, AXPB, axpb)?;
            let checksum = register_function(r, CHECKSUM, checksum)?;
            let reverse = register_function(r, REVERSE, reverse)?;
            let scale3 = register_function(r, SCALE3, scale3)?;
            let mixed = register_function(r, MIXED, mixed)?;
            let inner_prod = register_function(r, INNER_PROD, inner_prod)?;
            let fill = register_function(r, FILL, fill)?;
            let fail = register_function(r, FAIL, fail)?;
            Suite { empty, square, add, axpb, checksum, reverse, scale3, mixed, inner_prod, fill, fail }
        }
        Order::Reversed => {
            let fail = register_function(r, FAIL, fail)?;
            let fill = register_function(r, FILL, fill)?;
            let inner_prod = register_function(r, INNER_PROD, inner_prod)?;
            let mixed = register_function(r, MIXED, mixed)?;
            let scale3 = register_function(r, SCALE3, scale3)?;
            let reverse = register_function(r, REVERSE, reverse)?;
            let checksum = register_function(r, CHECKSUM, checksum)?;
            let axpb = register_function(r, AXPB, axpb)?;
            let add = register_function(r, ADD, add)?;
            let square = register_function(r, SQUARE, square)?;
            let empty = register_function(r, EMPTY, empty)?;
            Suite { empty, square, add, axpb, checksum, reverse, scale3, mixed, inner_prod, fill, fail }
        }
    })
}

pub fn register_extra(reg: &mut Registry<NodeContext>) -> Result<(), RegistryError> {
    register_function(reg, EXTRA, extra).map(drop)
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub calls: usize,
    pub mismatches: Vec<String>,
    /// Handler names exercised at least once, internal ones included.
    pub covered: BTreeSet<String>,
    /// Hash over every result, for comparing runs.
    pub result_digest: u64,
}

impl SuiteReport {
    /// User functions in `registry` that the run never called.
    pub fn uncovered(&self, registry: &Registry<NodeContext>) -> Vec<String> {
        registry
            .names()
            .unwrap_or_default()
            .into_iter()
            .filter(|n| !n.starts_with("__ham.") && !self.covered.contains(*n))
            .map(str::to_owned)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

struct Run<'a> {
    rt: &'a Runtime,
    target: NodeId,
    report: SuiteReport,
    digest: Vec<u8>,
}

impl Run<'_> {
    fn record<T: Migratable + PartialEq + std::fmt::Debug>(
        &mut self,
        name: &str,
        got: Result<T, OffloadError>,
        expected: Result<T, String>,
    ) {
        self.report.calls += 1;
        self.report.covered.insert(name.to_owned());
        let ok = match (&got, &expected) {
            (Ok(g), Ok(e)) => {
                self.digest.extend_from_slice(&g.to_bytes());
                g.to_bytes() == e.to_bytes()
            }
            (Err(OffloadError::Remote(g)), Err(e)) => {
                self.digest.extend_from_slice(g.message.as_bytes());
                g.message == *e
            }
            _ => false,
        };
        if !ok {
            self.report
                .mismatches
                .push(format!("call {} to {name}: got {got:?}, expected {expected:?}", self.report.calls));
        }
    }

    fn note(&mut self, name: &str) {
        self.report.covered.insert(name.to_owned());
    }
}

/// Runs `calls` (at least one per function) mixed offloads against `target`,
/// checking each result against a local call. The sequence depends only on
/// `seed`.
pub fn run_rpc_suite(
    rt: &Runtime,
    suite: &Suite,
    target: NodeId,
    calls: usize,
    seed: u64,
) -> Result<SuiteReport, OffloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run {
        rt,
        target,
        report: SuiteReport::default(),
        digest: Vec::new(),
    };
    let mut op = 0usize;
    while run.report.calls < calls || op < NAMES.len() {
        // The first pass visits every function once.
        let which = if op < NAMES.len() { op } else { rng.gen_range(0..NAMES.len()) };
        one_call(&mut run, suite, which, &mut rng)?;
        op += 1;
    }
    let live = rt.live_allocations(target)?;
    if live != 0 {
        run.report.mismatches.push(format!("{live} allocations left on {target}"));
    }
    run.note("__ham.stats");
    run.report.result_digest = fnv1a(&run.digest);
    Ok(run.report)
}

fn one_call(run: &mut Run<'_>, s: &Suite, which: usize, rng: &mut ChaCha8Rng) -> Result<(), OffloadError> {
    let (rt, t) = (run.rt, run.target);
    match NAMES[which] {
        EMPTY => run.record(EMPTY, rt.sync_offload(t, &s.empty.make_closure(())), Ok(empty())),
        SQUARE => {
            let x: i64 = rng.gen();
            // Exercise the asynchronous path as well.
            let got = rt.async_offload(t, &s.square.make_closure((x,)))?.get();
            run.record(SQUARE, got, Ok(square(x)));
        }
        ADD => {
            let (a, b) = (rng.gen(), rng.gen());
            run.record(ADD, rt.sync_offload(t, &s.add.make_closure((a, b))), Ok(add(a, b)));
        }
        AXPB => {
            let (a, x, b) = (rng.gen::<f64>() * 100.0, rng.gen::<f64>() - 0.5, rng.gen::<f64>());
            run.record(AXPB, rt.sync_offload(t, &s.axpb.make_closure((a, x, b))), Ok(axpb(a, x, b)));
        }
        CHECKSUM => {
            let len = rng.gen_range(0..4096);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let expected = checksum(data.clone());
            run.record(CHECKSUM, rt.sync_offload(t, &s.checksum.make_closure((data,))), Ok(expected));
        }
        REVERSE => {
            let len = rng.gen_range(0..40);
            let text: String = (0..len)
                .map(|_| ['a', 'z', 'é', '→', '😀', ' '][rng.gen_range(0..6)])
                .collect();
            let expected = reverse(text.clone());
            run.record(REVERSE, rt.sync_offload(t, &s.reverse.make_closure((text,))), Ok(expected));
        }
        SCALE3 => {
            let v = [rng.gen::<f32>(), -rng.gen::<f32>(), rng.gen::<f32>() * 1e6];
            let k = rng.gen::<f32>() * 3.0;
            run.record(SCALE3, rt.sync_offload(t, &s.scale3.make_closure((v, k))), Ok(scale3(v, k)));
        }
        MIXED => {
            let args: (i8, u16, i32, u64, f32) = (rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen::<f32>() * 1e3);
            let expected = mixed(args.0, args.1, args.2, args.3, args.4);
            run.record(MIXED, rt.sync_offload(t, &s.mixed.make_closure(args)), Ok(expected));
        }
        INNER_PROD => {
            let n = rng.gen_range(0..=256u64);
            let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
            let (ha, hb) = (rt.allocate(t, n, 8)?, rt.allocate(t, n, 8)?);
            rt.put(&f64_bytes(&a), &ha)?.get()?;
            rt.put(&f64_bytes(&b), &hb)?.get()?;
            let got = rt.sync_offload(t, &s.inner_prod.make_closure((ha, hb, n)));
            run.record(INNER_PROD, got, Ok(dot(&a, &b, n as usize)));
            let back = rt.get(&ha)?;
            run.record("__ham.get", Ok(back), Ok(f64_bytes(&a)));
            rt.free(&ha)?;
            rt.free(&hb)?;
            for name in ["__ham.alloc", "__ham.put", "__ham.free"] {
                run.note(name);
            }
        }
        FILL => {
            let len = rng.gen_range(0..=2048u64);
            let seed: u64 = rng.gen();
            let h = rt.allocate(t, len, 1)?;
            let got = rt.sync_offload(t, &s.fill.make_closure((h, seed)));
            run.record(FILL, got, Ok(()));
            run.record("__ham.get", rt.get(&h), Ok(fill_pattern(len, seed)));
            rt.free(&h)?;
        }
        FAIL => {
            let x: u32 = rng.gen_range(0..1000);
            run.record(FAIL, rt.sync_offload(t, &s.fail.make_closure((x,))), fail(x));
        }
        other => unreachable!("{other} is not in NAMES"),
    }
    Ok(())
}

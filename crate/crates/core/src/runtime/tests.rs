use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cluster::{Backend, LocalCluster};
use super::*;
use crate::messages::encode;
use crate::remote_function::{register_function, RemoteFn};

const T: NodeId = NodeId(1);
const BACKENDS: [Backend; 2] = [Backend::Loopback, Backend::Tcp];

#[derive(Clone)]
struct Fns {
    square: RemoteFn<(i64,), i64>,
    nothing: RemoteFn<(), ()>,
    fail: RemoteFn<(u32,), u32>,
    boom: RemoteFn<(), u8>,
    inner: RemoteFn<(RemoteBufferHandle, RemoteBufferHandle, u64), f64>,
    fill: RemoteFn<(RemoteBufferHandle, u64), ()>,
    where_am_i: RemoteFn<(), u64>,
}

fn inner_prod(a: RemoteBufferHandle, b: RemoteBufferHandle, n: u64) -> Result<f64, LocalError> {
    let (a, b) = (local::read_f64(&a)?, local::read_f64(&b)?);
    Ok(a.iter().zip(&b).take(n as usize).fold(0.0, |acc, (x, y)| acc + x * y))
}

fn fill(h: RemoteBufferHandle, seed: u64) -> Result<(), LocalError> {
    let bytes: Vec<u8> = (0..h.byte_len()).map(|i| (i ^ seed) as u8).collect();
    local::write(&h, &bytes)
}

fn register(reg: &mut Registry<NodeContext>) -> Result<Fns, RegistryError> {
    Ok(Fns {
        square: register_function(reg, "app.square", |x: i64| x.wrapping_mul(x))?,
        nothing: register_function(reg, "app.nothing", || ())?,
        fail: register_function(reg, "app.fail", |x: u32| {
            if x % 2 == 1 {
                Err(format!("odd input {x}"))
            } else {
                Ok(x / 2)
            }
        })?,
        boom: register_function(reg, "app.boom", || -> u8 { panic!("kaboom") })?,
        inner: register_function(reg, "app.inner_prod", inner_prod)?,
        fill: register_function(reg, "app.fill", fill)?,
        where_am_i: register_function(reg, "app.where", || local::node().map_or(u64::MAX, |n| n.0))?,
    })
}

fn start(backend: Backend, nodes: usize, policy: ExecutionPolicy) -> (LocalCluster, Fns) {
    let fns = Mutex::new(None);
    let config = RuntimeConfig {
        policy,
        ..Default::default()
    };
    let cluster = LocalCluster::start(backend, nodes, config, |node, reg| {
        let f = register(reg)?;
        if node == NodeId::HOST {
            *fns.lock().unwrap() = Some(f);
        }
        Ok(())
    })
    .unwrap();
    let fns = fns.into_inner().unwrap().unwrap();
    (cluster, fns)
}

fn finish_clean(cluster: LocalCluster) {
    let report = cluster.finish().unwrap();
    assert!(report.is_clean(), "{report:?}");
}

#[test]
fn square_offload_and_self_offload() {
    for backend in BACKENDS {
        let (c, f) = start(backend, 2, ExecutionPolicy::Direct);
        let rt = c.host();
        assert_eq!(rt.async_offload(T, &f.square.make_closure((7,))).unwrap().get(), Ok(49));
        assert_eq!(rt.sync_offload(NodeId(0), &f.square.make_closure((7,))), Ok(49));
        assert_eq!(rt.sync_offload(T, &f.square.make_closure((0,))), Ok(0));
        assert_eq!(rt.sync_offload(T, &f.nothing.make_closure(())), Ok(()));
        assert_eq!(rt.sync_offload(T, &f.where_am_i.make_closure(())), Ok(1));
        assert_eq!(rt.sync_offload(NodeId(0), &f.where_am_i.make_closure(())), Ok(0));
        finish_clean(c);
    }
}

#[test]
fn randomized_interleaving_matches_oracle() {
    for backend in BACKENDS {
        for policy in [ExecutionPolicy::Direct, "queued:3".parse().unwrap()] {
            let (c, f) = start(backend, 3, policy);
            let rt = c.host();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut pending = Vec::new();
            for _ in 0..100 {
                let x: i64 = rng.gen_range(-1_000_000..1_000_000);
                let target = NodeId(rng.gen_range(0..3));
                if rng.gen_bool(0.5) {
                    assert_eq!(rt.sync_offload(target, &f.square.make_closure((x,))), Ok(x * x));
                } else {
                    pending.push((x, rt.async_offload(target, &f.square.make_closure((x,))).unwrap()));
                }
            }
            for (x, fut) in pending {
                assert_eq!(fut.get(), Ok(x * x));
            }
            finish_clean(c);
        }
    }
}

#[test]
fn raw_offload_returns_encoded_result() {
    let (c, f) = start(Backend::Loopback, 2, ExecutionPolicy::Direct);
    let closure = f.square.make_closure((-5,)).into_untyped();
    let bytes = c.host().async_offload_raw(T, &closure).unwrap().get().unwrap();
    assert_eq!(bytes, 25i64.to_le_bytes());
    finish_clean(c);
}

#[test]
fn remote_failures_reach_the_caller() {
    for backend in BACKENDS {
        let (c, f) = start(backend, 2, ExecutionPolicy::Direct);
        let rt = c.host();
        assert_eq!(rt.sync_offload(T, &f.fail.make_closure((8,))), Ok(4));
        let err = rt.sync_offload(T, &f.fail.make_closure((7,))).unwrap_err();
        assert_eq!(err.remote_kind(), Some(RemoteErrorKind::Failed));
        assert!(err.to_string().contains("odd input 7"));
        let err = rt.sync_offload(T, &f.boom.make_closure(())).unwrap_err();
        assert!(err.to_string().contains("kaboom"));
        // The target keeps serving after a failure.
        assert_eq!(rt.sync_offload(T, &f.square.make_closure((3,))), Ok(9));
        finish_clean(c);
    }
}

#[test]
fn buffer_lifecycle() {
    for backend in BACKENDS {
        let (c, f) = start(backend, 2, ExecutionPolicy::Direct);
        let rt = c.host();
        let h = rt.allocate(T, 1024, 8).unwrap();
        assert_eq!((h.node, h.count, h.elem_size), (T, 1024, 8));
        let h2 = rt.allocate(T, 16, 1).unwrap();
        assert_ne!(h.token, h2.token);
        assert_eq!(rt.live_allocations(T), Ok(2));

        assert_eq!(rt.get(&h2).unwrap(), vec![0u8; 16]);
        let err = rt.put(&[0u8; 15], &h2).unwrap_err();
        assert_eq!(err, OffloadError::SizeMismatch { expected: 16, got: 15 });

        let xs: Vec<f64> = (0..1024).map(|i| (i as f64).sin()).collect();
        rt.put(&f64_bytes(&xs), &h).unwrap().get().unwrap();
        assert_eq!(f64_values(&rt.get(&h).unwrap()), xs);
        let oracle = xs.iter().fold(0.0, |acc, x| acc + x * x);
        let remote = rt.sync_offload(T, &f.inner.make_closure((h, h, 1024))).unwrap();
        assert_eq!(remote.to_bits(), oracle.to_bits());

        rt.sync_offload(T, &f.fill.make_closure((h2, 0x5a))).unwrap();
        let expected: Vec<u8> = (0..16u64).map(|i| (i ^ 0x5a) as u8).collect();
        assert_eq!(rt.get(&h2).unwrap(), expected);

        rt.free(&h).unwrap();
        assert_eq!(rt.get(&h).unwrap_err().remote_kind(), Some(RemoteErrorKind::InvalidToken));
        assert_eq!(rt.free(&h).unwrap_err().remote_kind(), Some(RemoteErrorKind::InvalidToken));
        let err = rt.sync_offload(T, &f.inner.make_closure((h, h, 1))).unwrap_err();
        assert!(err.to_string().contains("no live allocation"), "{err}");
        rt.free(&h2).unwrap();
        assert_eq!(rt.live_allocations(T), Ok(0));
        finish_clean(c);
    }
}

#[test]
fn zero_length_buffers() {
    let (c, _) = start(Backend::Loopback, 2, ExecutionPolicy::Direct);
    let rt = c.host();
    let h = rt.allocate(T, 0, 8).unwrap();
    rt.put(&[], &h).unwrap().get().unwrap();
    assert_eq!(rt.get(&h).unwrap(), Vec::<u8>::new());
    rt.free(&h).unwrap();
    finish_clean(c);
}

#[test]
fn buffers_are_per_node() {
    let (c, f) = start(Backend::Loopback, 3, ExecutionPolicy::Direct);
    let rt = c.host();
    let on1 = rt.allocate(T, 2, 8).unwrap();
    let err = rt.sync_offload(NodeId(2), &f.inner.make_closure((on1, on1, 2))).unwrap_err();
    assert!(err.to_string().contains("lives on node 1"), "{err}");
    let too_big = rt.allocate(T, u64::MAX / 2, 4).unwrap_err();
    assert_eq!(too_big.remote_kind(), Some(RemoteErrorKind::AllocationFailed));
    rt.free(&on1).unwrap();
    finish_clean(c);
}

#[test]
fn terminate_drains_in_flight_work() {
    for backend in BACKENDS {
        for policy in [ExecutionPolicy::Direct, "queued:2".parse().unwrap()] {
            let (c, f) = start(backend, 2, policy);
            let rt = c.host().clone();
            let futs: Vec<_> = (0..3)
                .map(|x| rt.async_offload(T, &f.square.make_closure((x,))).unwrap())
                .collect();
            rt.terminate(T).unwrap();
            for (x, fut) in futs.iter().enumerate() {
                assert_eq!(fut.get(), Ok((x * x) as i64));
            }
            assert_eq!(
                rt.sync_offload(T, &f.square.make_closure((2,))),
                Err(OffloadError::PeerGone(T))
            );
            assert_eq!(rt.terminate(T), Err(OffloadError::PeerGone(T)));
            finish_clean(c);
        }
    }
}

#[test]
fn terminate_all_is_prompt() {
    for backend in BACKENDS {
        let (c, _) = start(backend, 4, ExecutionPolicy::Direct);
        let t0 = Instant::now();
        let report = c.finish().unwrap();
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(report.targets.len(), 3);
        assert!(t0.elapsed() < Duration::from_secs(1));
    }
}

#[test]
fn unknown_key_aborts_the_receiver() {
    for backend in BACKENDS {
        let (mut c, _) = start(backend, 2, ExecutionPolicy::Direct);
        let count = c.host().registry().handler_count() as u64;
        c.host().transport().send(T, encode(HandlerKey(count), &[])).unwrap();
        let err = c.join_loop(T).unwrap_err();
        assert!(matches!(err, RuntimeError::UnknownHandlerKey { key, from: NodeId(0), .. } if key == count));
        assert_eq!(err.exit_code(), EXIT_PROTOCOL);
    }
}

#[test]
fn lost_target_fails_waiting_futures() {
    let (c, f) = start(Backend::Tcp, 2, ExecutionPolicy::Direct);
    let fut = {
        // Node 1 goes away without being terminated.
        c.runtime(T).shutdown();
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match c.host().async_offload(T, &f.square.make_closure((1,))) {
                Ok(fut) => match fut.get_timeout(Duration::from_millis(200)) {
                    Err(OffloadError::PeerGone(T)) => break Ok(()),
                    other if Instant::now() > deadline => break Err(format!("{other:?}")),
                    _ => {}
                },
                Err(OffloadError::PeerGone(T)) => break Ok(()),
                Err(e) => break Err(e.to_string()),
            }
        }
    };
    assert_eq!(fut, Ok(()));
}

#[test]
fn stray_results_are_audited() {
    let (c, _) = start(Backend::Loopback, 2, ExecutionPolicy::Direct);
    let ctx = NodeContext {
        shared: c.runtime(T).shared.clone(),
        source: NodeId(0),
    };
    ctx.reply(NodeId(0), 999_999, Ok(Vec::new()));
    let deadline = Instant::now() + Duration::from_secs(2);
    while c.host().audit().unmatched == 0 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let report = c.finish().unwrap();
    assert_eq!(report.host_audit.unmatched, 1);
    assert!(!report.is_clean());
}

#[test]
fn oversized_requests_are_refused_locally() {
    let config = RuntimeConfig {
        max_payload: 4096,
        ..Default::default()
    };
    let c = LocalCluster::start(Backend::Loopback, 2, config, |_, _| Ok(())).unwrap();
    let rt = c.host();
    assert_eq!(rt.config().max_buffer_bytes(), 4096 - 32);
    let h = rt.allocate(T, 4064, 1).unwrap();
    rt.put(&vec![7u8; 4064], &h).unwrap().get().unwrap();
    assert_eq!(rt.get(&h).unwrap(), vec![7u8; 4064]);
    assert_eq!(
        rt.allocate(T, 4065, 1).unwrap_err().remote_kind(),
        Some(RemoteErrorKind::AllocationFailed)
    );
    c.finish().unwrap();
}

#[test]
fn policy_and_frame_limit_from_env_values() {
    assert_eq!(
        "queued:4".parse::<ExecutionPolicy>().unwrap(),
        ExecutionPolicy::Queued {
            workers: 4,
            capacity: crate::messages::DEFAULT_QUEUE_CAPACITY
        }
    );
    assert_eq!(RuntimeError::Config("x".into()).exit_code(), EXIT_USAGE);
    assert_eq!(RuntimeError::PeerLost(T).exit_code(), EXIT_TRANSPORT);
    let mismatch = TransportError::DigestMismatch {
        peer: T,
        local: 1,
        remote: 2,
    };
    assert_eq!(RuntimeError::from(mismatch).exit_code(), EXIT_PROTOCOL);
}

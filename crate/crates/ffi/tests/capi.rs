use std::ffi::{c_void, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ham_ffi::*;

fn last_error() -> String {
    let p = ham_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ok(status: HamStatus) {
    assert_eq!(status, HamStatus::Ok, "{}", last_error());
}

/// Sums the argument bytes into a little-endian u64; counts calls in `user_data`.
unsafe extern "C" fn sum(user_data: *mut c_void, args: *const u8, len: usize, reply: *mut HamReply) -> i32 {
    let calls = &*(user_data as *const std::sync::atomic::AtomicU64);
    calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let args = if len == 0 { &[][..] } else { std::slice::from_raw_parts(args, len) };
    let total: u64 = args.iter().map(|&b| b as u64).sum();
    let out = total.to_le_bytes();
    ham_reply_set(reply, out.as_ptr(), out.len());
    0
}

unsafe extern "C" fn refuse(_: *mut c_void, _: *const u8, _: usize, reply: *mut HamReply) -> i32 {
    ham_reply_set_error(reply, c"refused on purpose".as_ptr());
    7
}

/// Treats the arguments as an encoded `HamBuffer` on the running node and
/// returns its contents reversed, also writing them back.
unsafe extern "C" fn reverse_local(_: *mut c_void, args: *const u8, len: usize, reply: *mut HamReply) -> i32 {
    if len != std::mem::size_of::<HamBuffer>() {
        return 1;
    }
    let buf: HamBuffer = ptr::read_unaligned(args as *const HamBuffer);
    let mut data = vec![0u8; (buf.count * buf.elem_size) as usize];
    if ham_local_read(&buf, data.as_mut_ptr(), data.len()) != HamStatus::Ok {
        return 2;
    }
    data.reverse();
    if ham_local_write(&buf, data.as_ptr(), data.len()) != HamStatus::Ok {
        return 3;
    }
    ham_reply_set(reply, data.as_ptr(), data.len());
    0
}

fn registry(calls: &std::sync::atomic::AtomicU64) -> *mut HamRegistry {
    let reg = ham_registry_new();
    unsafe {
        ok(ham_registry_register(reg, c"c.sum".as_ptr(), Some(sum), calls as *const _ as *mut c_void));
        ok(ham_registry_register(reg, c"c.refuse".as_ptr(), Some(refuse), ptr::null_mut()));
        ok(ham_registry_register(reg, c"c.reverse_local".as_ptr(), Some(reverse_local), ptr::null_mut()));
    }
    reg
}

fn bytes(b: &HamBytes) -> &[u8] {
    if b.len == 0 {
        &[]
    } else {
        unsafe { std::slice::from_raw_parts(b.data, b.len) }
    }
}

fn exercise(backend: HamBackend) {
    let calls = [std::sync::atomic::AtomicU64::new(0), std::sync::atomic::AtomicU64::new(0)];
    let regs = [registry(&calls[0]), registry(&calls[1])];
    let mut rts = [ptr::null_mut(); 2];
    unsafe {
        ok(ham_runtime_local(backend, regs.as_ptr(), 2, rts.as_mut_ptr()));
        let (host, target) = (rts[0] as *const HamRuntime, rts[1] as *const HamRuntime);
        assert_eq!(ham_runtime_node(host), 0);
        assert_eq!(ham_runtime_node(target), 1);
        assert_eq!(ham_runtime_node_count(host), 2);

        let args = [1u8, 2, 3, 250];
        let mut out = HamBytes { data: ptr::null_mut(), len: 0 };
        ok(ham_offload_sync(host, 1, c"c.sum".as_ptr(), args.as_ptr(), args.len(), &mut out));
        assert_eq!(bytes(&out), 256u64.to_le_bytes());
        ham_bytes_free(&mut out);
        assert_eq!(calls[1].load(std::sync::atomic::Ordering::Relaxed), 1);
        assert_eq!(calls[0].load(std::sync::atomic::Ordering::Relaxed), 0);

        // Many calls in flight at once, empty arguments included.
        let mut futures = Vec::new();
        for n in 0..50usize {
            let args = vec![1u8; n];
            let mut f = ptr::null_mut();
            ok(ham_offload_async(host, 1, c"c.sum".as_ptr(), args.as_ptr(), n, &mut f));
            futures.push((n, f));
        }
        for (n, f) in futures {
            ok(ham_future_get_timeout(f, 10_000, &mut out));
            assert!(ham_future_is_ready(f));
            assert_eq!(bytes(&out), (n as u64).to_le_bytes());
            ham_bytes_free(&mut out);
            ham_future_free(f);
        }

        let status = ham_offload_sync(host, 1, c"c.refuse".as_ptr(), ptr::null(), 0, &mut out);
        assert_eq!(status, HamStatus::RemoteFailed);
        assert!(last_error().contains("refused on purpose"), "{}", last_error());
        let status = ham_offload_sync(host, 1, c"c.nope".as_ptr(), ptr::null(), 0, &mut out);
        assert_eq!(status, HamStatus::UnknownName);
        let status = ham_offload_sync(host, 9, c"c.sum".as_ptr(), ptr::null(), 0, &mut out);
        assert_eq!(status, HamStatus::UnknownPeer);

        // Buffers: round trip, then a remote function working on the data in place.
        let mut buf = HamBuffer { node: 0, token: 0, count: 0, elem_size: 0 };
        ok(ham_buffer_allocate(host, 1, 16, 4, &mut buf));
        assert_eq!((buf.node, buf.count, buf.elem_size), (1, 16, 4));
        let data: Vec<u8> = (0..64).collect();
        ok(ham_buffer_put(host, &buf, data.as_ptr(), data.len()));
        let mut back = vec![0u8; 64];
        ok(ham_buffer_get(host, &buf, back.as_mut_ptr(), back.len()));
        assert_eq!(back, data);
        assert_eq!(ham_buffer_get(host, &buf, back.as_mut_ptr(), 63), HamStatus::SizeMismatch);
        assert_eq!(ham_buffer_put(host, &buf, data.as_ptr(), 63), HamStatus::SizeMismatch);
        let raw = std::slice::from_raw_parts(&buf as *const HamBuffer as *const u8, std::mem::size_of::<HamBuffer>());
        ok(ham_offload_sync(host, 1, c"c.reverse_local".as_ptr(), raw.as_ptr(), raw.len(), &mut out));
        let reversed: Vec<u8> = (0..64).rev().collect();
        assert_eq!(bytes(&out), &reversed[..]);
        ham_bytes_free(&mut out);
        ok(ham_buffer_get(host, &buf, back.as_mut_ptr(), back.len()));
        assert_eq!(back, reversed);
        let mut live = 99;
        ok(ham_live_allocations(host, 1, &mut live));
        assert_eq!(live, 1);
        ok(ham_buffer_free(host, &buf));
        assert_eq!(ham_buffer_free(host, &buf), HamStatus::InvalidToken);
        ok(ham_live_allocations(host, 1, &mut live));
        assert_eq!(live, 0);
        // Outside a remote function there is no local node.
        assert_eq!(ham_local_read(&buf, back.as_mut_ptr(), 64), HamStatus::InvalidArgument);

        ok(ham_terminate_all(host));
        ok(ham_runtime_wait(target));
        let status = ham_offload_sync(host, 1, c"c.sum".as_ptr(), ptr::null(), 0, &mut out);
        assert_eq!(status, HamStatus::Transport);
        ham_runtime_free(rts[1]);
        ham_runtime_free(rts[0]);
    }
}

#[test]
fn loopback_end_to_end() {
    exercise(HamBackend::Loopback);
}

#[test]
fn tcp_end_to_end() {
    exercise(HamBackend::Tcp);
}

#[test]
fn differing_registries_are_a_protocol_error() {
    let calls = std::sync::atomic::AtomicU64::new(0);
    let a = registry(&calls);
    let b = registry(&calls);
    unsafe {
        ok(ham_registry_register(b, c"c.extra".as_ptr(), Some(sum), ptr::null_mut()));
        let mut rts = [ptr::null_mut(); 2];
        let status = ham_runtime_local(HamBackend::Loopback, [a, b].as_ptr(), 2, rts.as_mut_ptr());
        assert_eq!(status, HamStatus::Protocol);
        assert!(last_error().contains("digest"), "{}", last_error());
    }
}

#[test]
fn registration_errors() {
    let reg = ham_registry_new();
    unsafe {
        ok(ham_registry_register(reg, c"c.one".as_ptr(), Some(refuse), ptr::null_mut()));
        assert_eq!(ham_registry_register(reg, c"c.one".as_ptr(), Some(refuse), ptr::null_mut()), HamStatus::Registry);
        assert_eq!(ham_registry_register(reg, c"__ham.mine".as_ptr(), Some(refuse), ptr::null_mut()), HamStatus::Registry);
        assert_eq!(ham_registry_register(reg, ptr::null(), Some(refuse), ptr::null_mut()), HamStatus::NullArgument);
        assert_eq!(ham_registry_register(reg, c"c.two".as_ptr(), None, ptr::null_mut()), HamStatus::NullArgument);
        assert_eq!(ham_registry_register(ptr::null_mut(), c"c.two".as_ptr(), Some(refuse), ptr::null_mut()), HamStatus::NullArgument);
        ham_registry_free(reg);
        let mut out = ptr::null_mut();
        let bad = CString::new("not a peer list").unwrap();
        let status = ham_runtime_connect_tcp(ham_registry_new(), 0, bad.as_ptr(), &mut out);
        assert_eq!(status, HamStatus::InvalidArgument, "{}", last_error());
        assert!(out.is_null());
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_compiles_as_c_and_cpp() {
    if !have_cc() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    let header = crate_dir().join("include/ham.h");
    for lang in ["c", "c++"] {
        let out = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", "-x", lang])
            .arg(&header)
            .output()
            .unwrap();
        assert!(out.status.success(), "{lang}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

/// `target/<profile>` of the running test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libham_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("no C compiler or {} missing; skipping", lib.display());
        return;
    }
    let dir = std::env::temp_dir().join(format!("ham-ffi-smoke-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let exe = dir.join("smoke");
    let out = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "c smoke ok");
}

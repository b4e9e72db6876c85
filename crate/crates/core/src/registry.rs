//! Handler registry.
//!
//! Handlers are collected under explicit names during a startup phase. A
//! single call to [`Registry::init`] then sorts the names byte-wise and makes
//! each name's rank its [`HandlerKey`]. Because the order depends only on the
//! set of names, every process that registered the same set ends up with the
//! same mapping, no matter in which order registration happened or where the
//! handlers live in its address space.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Names starting with this prefix belong to the library's own handlers.
pub const INTERNAL_PREFIX: &str = "__ham.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("handler names must not be empty")]
    EmptyName,
    #[error("handler name {0:?} is already registered")]
    DuplicateName(String),
    #[error("handler name {0:?} uses the reserved prefix \"__ham.\"")]
    ReservedName(String),
    #[error("registry is already initialized")]
    AlreadyInitialized,
    #[error("registry is not initialized")]
    NotInitialized,
    #[error("no handler registered under {0:?}")]
    UnknownName(String),
    #[error("handler key {key} out of range (handler count {count})")]
    KeyOutOfRange { key: u64, count: usize },
}

/// Stable, process-independent name of a remotely callable handler.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HandlerName(String);

impl HandlerName {
    pub fn new(name: impl Into<String>) -> Result<Self, RegistryError> {
        let name = name.into();
        if name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        Ok(HandlerName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_internal(&self) -> bool {
        self.0.starts_with(INTERNAL_PREFIX)
    }
}

impl fmt::Debug for HandlerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl fmt::Display for HandlerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<&str> for HandlerName {
    type Error = RegistryError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        HandlerName::new(value)
    }
}

/// Globally valid handler identity: the rank of the handler's name in the
/// sorted name list. Travels as a little-endian `u64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HandlerKey(pub u64);

impl HandlerKey {
    pub fn index(self) -> u64 {
        self.0
    }
}

impl fmt::Display for HandlerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A handler receives the execution context of the delivering runtime and the
/// message payload. Replies, if any, are sent through the context.
pub type Handler<C> = Arc<dyn Fn(&C, &[u8]) + Send + Sync>;

pub struct RegistryEntry<C> {
    name: HandlerName,
    handler: Handler<C>,
    // Registration ordinal; only meaningful inside this process, like a code address.
    local_id: usize,
}

impl<C> RegistryEntry<C> {
    pub fn name(&self) -> &HandlerName {
        &self.name
    }

    pub fn handler(&self) -> &Handler<C> {
        &self.handler
    }

    pub fn local_id(&self) -> usize {
        self.local_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Collecting,
    Initialized,
}

pub struct Registry<C> {
    phase: Phase,
    // Registration order while collecting, key order once initialized.
    entries: Vec<RegistryEntry<C>>,
    names: HashSet<HandlerName>,
    keys: HashMap<String, HandlerKey>,
    table: Vec<Handler<C>>,
    digest: u64,
    #[cfg(test)]
    probes: std::sync::atomic::AtomicUsize,
}

impl<C> Default for Registry<C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<C> fmt::Debug for Registry<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("phase", &self.phase)
            .field("handlers", &self.entries.len())
            .field("digest", &format_args!("{:#018x}", self.digest))
            .finish()
    }
}

impl<C> Registry<C> {
    pub fn new() -> Self {
        Registry {
            phase: Phase::Collecting,
            entries: Vec::new(),
            names: HashSet::new(),
            keys: HashMap::new(),
            table: Vec::new(),
            digest: 0,
            #[cfg(test)]
            probes: Default::default(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_initialized(&self) -> bool {
        self.phase == Phase::Initialized
    }

    /// Stores a handler under `name`. No key is assigned until [`init`](Self::init).
    pub fn register(
        &mut self,
        name: &str,
        handler: Handler<C>,
    ) -> Result<(), RegistryError> {
        let name = HandlerName::new(name)?;
        if self.phase != Phase::Collecting {
            return Err(RegistryError::AlreadyInitialized);
        }
        if !self.names.insert(name.clone()) {
            return Err(RegistryError::DuplicateName(name.0));
        }
        let local_id = self.entries.len();
        self.entries.push(RegistryEntry {
            name,
            handler,
            local_id,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name.as_str() == name)
    }

    /// Sorts the collected names and assigns dense keys. Returns the handler count.
    pub fn init(&mut self) -> Result<usize, RegistryError> {
        if self.phase != Phase::Collecting {
            return Err(RegistryError::AlreadyInitialized);
        }
        // `str` ordering is byte-wise on the UTF-8 encoding.
        self.entries.sort_by(|a, b| a.name.cmp(&b.name));
        self.keys = self
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| (e.name.0.clone(), HandlerKey(k as u64)))
            .collect();
        self.table = self.entries.iter().map(|e| e.handler.clone()).collect();
        self.digest = names_digest(self.entries.iter().map(|e| e.name.as_str()));
        self.phase = Phase::Initialized;
        Ok(self.table.len())
    }

    fn require_init(&self) -> Result<(), RegistryError> {
        if self.phase != Phase::Initialized {
            return Err(RegistryError::NotInitialized);
        }
        Ok(())
    }

    pub fn handler_count(&self) -> usize {
        self.entries.len()
    }

    pub fn key_of(&self, name: &str) -> Result<HandlerKey, RegistryError> {
        self.require_init()?;
        self.keys
            .get(name)
            .copied()
            .ok_or_else(|| RegistryError::UnknownName(name.to_owned()))
    }

    /// Constant-time table index.
    pub fn handler_of(&self, key: HandlerKey) -> Result<&Handler<C>, RegistryError> {
        self.require_init()?;
        #[cfg(test)]
        self.probes
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        usize::try_from(key.0)
            .ok()
            .and_then(|k| self.table.get(k))
            .ok_or(RegistryError::KeyOutOfRange {
                key: key.0,
                count: self.table.len(),
            })
    }

    /// Looks up `key` and runs its handler with `ctx` and `payload`.
    pub fn invoke(&self, key: HandlerKey, ctx: &C, payload: &[u8]) -> Result<(), RegistryError> {
        let handler = self.handler_of(key)?;
        handler(ctx, payload);
        Ok(())
    }

    /// 64-bit hash of the sorted name list; equal name sets give equal digests.
    pub fn digest(&self) -> Result<u64, RegistryError> {
        self.require_init()?;
        Ok(self.digest)
    }

    /// Names in key order.
    pub fn names(&self) -> Result<Vec<&str>, RegistryError> {
        self.require_init()?;
        Ok(self.entries.iter().map(|e| e.name.as_str()).collect())
    }

    pub fn entries(&self) -> &[RegistryEntry<C>] {
        &self.entries
    }

    /// Human-readable dump of the name map and the key-indexed handler vector.
    pub fn dump_table(&self) -> Result<String, RegistryError> {
        self.require_init()?;
        let mut out = String::new();
        out.push_str("===== BEGIN HANDLER MAP =====\n");
        for entry in &self.entries {
            out.push_str(&format!("name: {}\n", entry.name));
            out.push_str(&format!("handler: local:{}\n", entry.local_id));
        }
        out.push_str("===== END HANDLER MAP =====\n");
        out.push_str("===== BEGIN HANDLER VECTOR =====\n");
        for (index, entry) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "index: {index}, handler: local:{}\n",
                entry.local_id
            ));
        }
        out.push_str("===== END HANDLER VECTOR =====\n");
        Ok(out)
    }

    #[cfg(test)]
    fn probe_count(&self) -> usize {
        self.probes.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// Digest over names given in key order. Each name is length-prefixed so that
/// different splits of the same concatenation hash differently.
pub fn names_digest<'a>(sorted_names: impl IntoIterator<Item = &'a str>) -> u64 {
    let mut hasher = Sha256::new();
    for name in sorted_names {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::collections::BTreeMap;

    type Log = RefCell<Vec<String>>;

    fn marker(tag: &'static str) -> Handler<Log> {
        Arc::new(move |log: &Log, payload: &[u8]| {
            log.borrow_mut()
                .push(format!("{tag}:{}", String::from_utf8_lossy(payload)))
        })
    }

    fn noop<C>() -> Handler<C> {
        Arc::new(|_: &C, _: &[u8]| {})
    }

    fn registry_of(names: &[&'static str]) -> Registry<Log> {
        let mut reg = Registry::new();
        for n in names {
            reg.register(*n, marker(n)).unwrap();
        }
        reg.init().unwrap();
        reg
    }

    #[test]
    fn register_single() {
        let mut reg: Registry<Log> = Registry::new();
        reg.register("app.square", noop()).unwrap();
        assert!(reg.contains("app.square"));
        assert_eq!(reg.handler_count(), 1);
    }

    #[test]
    fn register_duplicate_rejected() {
        let mut reg: Registry<Log> = Registry::new();
        reg.register("app.square", noop()).unwrap();
        assert_eq!(
            reg.register("app.square", noop()),
            Err(RegistryError::DuplicateName("app.square".into()))
        );
    }

    #[test]
    fn register_after_init_rejected() {
        let mut reg: Registry<Log> = Registry::new();
        reg.init().unwrap();
        assert_eq!(
            reg.register("x", noop()),
            Err(RegistryError::AlreadyInitialized)
        );
    }

    #[test]
    fn empty_name_rejected() {
        let mut reg: Registry<Log> = Registry::new();
        assert_eq!(reg.register("", noop()), Err(RegistryError::EmptyName));
    }

    #[test]
    fn init_sorts_lexicographically() {
        let reg = registry_of(&["b", "a", "c"]);
        assert_eq!(reg.key_of("a"), Ok(HandlerKey(0)));
        assert_eq!(reg.key_of("b"), Ok(HandlerKey(1)));
        assert_eq!(reg.key_of("c"), Ok(HandlerKey(2)));

        let rev = registry_of(&["c", "b", "a"]);
        for n in ["a", "b", "c"] {
            assert_eq!(reg.key_of(n), rev.key_of(n));
        }
    }

    #[test]
    fn init_twice_is_an_error() {
        let mut reg: Registry<Log> = Registry::new();
        assert_eq!(reg.init(), Ok(0));
        assert_eq!(reg.init(), Err(RegistryError::AlreadyInitialized));
    }

    #[test]
    fn three_handlers_occupy_dense_keys() {
        let reg = registry_of(&["fun_one", "__ham.terminate", "lambda"]);
        let mut keys: Vec<u64> = reg
            .names()
            .unwrap()
            .iter()
            .map(|n| reg.key_of(n).unwrap().0)
            .collect();
        keys.sort();
        assert_eq!(keys, vec![0, 1, 2]);
        assert_eq!(reg.key_of("__ham.terminate"), Ok(HandlerKey(0)));
    }

    #[test]
    fn lookups_before_init_fail() {
        let mut reg: Registry<Log> = Registry::new();
        reg.register("a", noop()).unwrap();
        assert_eq!(reg.key_of("a"), Err(RegistryError::NotInitialized));
        assert!(matches!(
            reg.handler_of(HandlerKey(0)),
            Err(RegistryError::NotInitialized)
        ));
        assert_eq!(reg.digest(), Err(RegistryError::NotInitialized));
        assert_eq!(reg.dump_table(), Err(RegistryError::NotInitialized));
    }

    #[test]
    fn key_of_unknown() {
        let reg = registry_of(&["a", "b", "c"]);
        assert_eq!(reg.key_of("c"), Ok(HandlerKey(2)));
        assert_eq!(
            reg.key_of("zzz"),
            Err(RegistryError::UnknownName("zzz".into()))
        );
    }

    #[test]
    fn handler_of_boundary() {
        let reg = registry_of(&["a", "b", "c"]);
        assert!(matches!(
            reg.handler_of(HandlerKey(3)),
            Err(RegistryError::KeyOutOfRange { key: 3, count: 3 })
        ));
        assert!(reg.handler_of(HandlerKey(u64::MAX)).is_err());
    }

    #[test]
    fn handler_of_matches_registration_records() {
        // Enumerate every key and check the side effect against the name it was
        // registered under.
        let names = ["b", "c", "a"];
        let reg = registry_of(&names);
        for name in names {
            let log = Log::default();
            let key = reg.key_of(name).unwrap();
            reg.handler_of(key).unwrap()(&log, b"p");
            assert_eq!(log.into_inner(), vec![format!("{name}:p")]);
        }
        let log = Log::default();
        reg.invoke(HandlerKey(1), &log, b"x").unwrap();
        assert_eq!(log.into_inner(), vec!["b:x".to_string()]);
    }

    #[test]
    fn handler_of_is_a_single_index() {
        let mut reg: Registry<()> = Registry::new();
        for i in 0..10_000 {
            reg.register(format!("h{i:05}").as_str(), noop()).unwrap();
        }
        reg.init().unwrap();
        let before = reg.probe_count();
        for k in [0u64, 5_000, 9_999] {
            reg.handler_of(HandlerKey(k)).unwrap();
        }
        assert_eq!(reg.probe_count() - before, 3);
    }

    #[test]
    fn dump_format() {
        let mut reg: Registry<Log> = Registry::new();
        reg.register("fun_one", noop()).unwrap();
        reg.register("__ham.terminate", noop()).unwrap();
        reg.register("lambda", noop()).unwrap();
        reg.init().unwrap();
        let expected = "\
===== BEGIN HANDLER MAP =====
name: __ham.terminate
handler: local:1
name: fun_one
handler: local:0
name: lambda
handler: local:2
===== END HANDLER MAP =====
===== BEGIN HANDLER VECTOR =====
index: 0, handler: local:1
index: 1, handler: local:0
index: 2, handler: local:2
===== END HANDLER VECTOR =====
";
        assert_eq!(reg.dump_table().unwrap(), expected);
    }

    #[test]
    fn dump_of_empty_registry() {
        let mut reg: Registry<Log> = Registry::new();
        reg.init().unwrap();
        let dump = reg.dump_table().unwrap();
        assert_eq!(
            dump,
            "===== BEGIN HANDLER MAP =====\n===== END HANDLER MAP =====\n\
             ===== BEGIN HANDLER VECTOR =====\n===== END HANDLER VECTOR =====\n"
        );
    }

    #[test]
    fn dump_is_reproducible() {
        let a = registry_of(&["x", "y", "z"]).dump_table().unwrap();
        let b = registry_of(&["x", "y", "z"]).dump_table().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn byte_order_not_locale_order() {
        // Uppercase sorts before underscore, which sorts before lowercase.
        let reg = registry_of(&["apple", "__ham.x", "Zebra", "\u{e9}clair"]);
        assert_eq!(
            reg.names().unwrap(),
            vec!["Zebra", "__ham.x", "apple", "\u{e9}clair"]
        );
    }

    fn random_names(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
        let mut set = HashSet::new();
        while set.len() < count {
            let len = rng.gen_range(1..12);
            let s: String = (0..len)
                .map(|_| (b'0' + rng.gen_range(0..75u8)) as char)
                .collect();
            set.insert(s);
        }
        set.into_iter().collect()
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names = random_names(&mut rng, 50);

        // Independent oracle: rank in a separately sorted copy.
        let mut sorted = names.clone();
        sorted.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
        let oracle: BTreeMap<&str, u64> = sorted
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u64))
            .collect();

        let mut order = names.clone();
        for _ in 0..1000 {
            order.shuffle(&mut rng);
            let mut reg: Registry<()> = Registry::new();
            for n in &order {
                reg.register(n.as_str(), noop()).unwrap();
            }
            reg.init().unwrap();
            let keys: BTreeMap<&str, u64> = names
                .iter()
                .map(|n| (n.as_str(), reg.key_of(n).unwrap().0))
                .collect();
            assert_eq!(keys, oracle);
        }
    }

    #[test]
    fn digest_agreement_and_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let names = random_names(&mut rng, 20);
        let build = |set: &[String]| {
            let mut reg: Registry<()> = Registry::new();
            for n in set {
                reg.register(n.as_str(), noop()).unwrap();
            }
            reg.init().unwrap();
            reg.digest().unwrap()
        };
        let base = build(&names);
        let mut reversed = names.clone();
        reversed.reverse();
        assert_eq!(base, build(&reversed));

        let mut seen = HashSet::new();
        seen.insert(base);
        for i in 0..10_000u32 {
            let mut perturbed = names.clone();
            let idx = i as usize % perturbed.len();
            perturbed[idx] = format!("{}#{i}", perturbed[idx]);
            let d = names_digest({
                perturbed.sort();
                perturbed.iter().map(String::as_str).collect::<Vec<_>>()
            });
            assert!(seen.insert(d), "digest collision at perturbation {i}");
        }
    }

    #[test]
    fn digest_separates_concatenation_splits() {
        assert_ne!(names_digest(["ab", "c"]), names_digest(["a", "bc"]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn keys_are_a_bijection(names in prop::collection::hash_set("[a-z._]{1,8}", 0..40)) {
                let mut reg: Registry<()> = Registry::new();
                for n in &names {
                    reg.register(n.as_str(), noop()).unwrap();
                }
                prop_assert_eq!(reg.init().unwrap(), names.len());
                let mut keys: Vec<u64> = names.iter().map(|n| reg.key_of(n).unwrap().0).collect();
                keys.sort_unstable();
                prop_assert_eq!(keys, (0..names.len() as u64).collect::<Vec<_>>());
            }
        }
    }
}

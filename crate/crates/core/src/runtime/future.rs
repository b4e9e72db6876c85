use std::fmt;
use std::marker::PhantomData;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::OffloadError;

/// Completion slot shared between a future and the receive loop.
#[derive(Default)]
pub(crate) struct Slot {
    state: Mutex<Option<Result<Vec<u8>, OffloadError>>>,
    ready: Condvar,
}

impl Slot {
    /// Returns false if the slot was already complete.
    pub(crate) fn complete(&self, outcome: Result<Vec<u8>, OffloadError>) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.is_some() {
            return false;
        }
        *state = Some(outcome);
        self.ready.notify_all();
        true
    }

    fn wait(&self, deadline: Option<Instant>) -> Option<Result<Vec<u8>, OffloadError>> {
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(outcome) = state.as_ref() {
                return Some(outcome.clone());
            }
            match deadline {
                None => state = self.ready.wait(state).unwrap(),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return None;
                    }
                    state = self.ready.wait_timeout(state, deadline - now).unwrap().0;
                }
            }
        }
    }

    fn is_ready(&self) -> bool {
        self.state.lock().unwrap().is_some()
    }
}

/// Result of an asynchronous offload.
///
/// `get` blocks until the result message arrives; it may be called any number
/// of times and always yields the same value.
pub struct OffloadFuture<R> {
    request_id: u64,
    slot: Arc<Slot>,
    decode: fn(&[u8]) -> Result<R, OffloadError>,
    _result: PhantomData<fn() -> R>,
}

impl<R> OffloadFuture<R> {
    pub(crate) fn new(request_id: u64, slot: Arc<Slot>, decode: fn(&[u8]) -> Result<R, OffloadError>) -> Self {
        OffloadFuture {
            request_id,
            slot,
            decode,
            _result: PhantomData,
        }
    }

    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn is_ready(&self) -> bool {
        self.slot.is_ready()
    }

    pub fn get(&self) -> Result<R, OffloadError> {
        let outcome = self.slot.wait(None).expect("no deadline");
        (self.decode)(&outcome?)
    }

    /// Like [`get`](Self::get) but gives up after `timeout` with
    /// [`OffloadError::TimedOut`]; the future stays usable.
    pub fn get_timeout(&self, timeout: Duration) -> Result<R, OffloadError> {
        match self.slot.wait(Some(Instant::now() + timeout)) {
            Some(outcome) => (self.decode)(&outcome?),
            None => Err(OffloadError::TimedOut),
        }
    }
}

impl<R> fmt::Debug for OffloadFuture<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OffloadFuture")
            .field("request_id", &self.request_id)
            .field("ready", &self.is_ready())
            .finish()
    }
}

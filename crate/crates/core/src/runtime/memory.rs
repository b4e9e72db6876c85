//! Per-node remote buffers and node-local access for user functions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::Shared;
use crate::remote_function::{RemoteError, RemoteErrorKind};
use crate::transport::NodeId;

/// Cross-address-space reference to a buffer allocated on `node`.
///
/// `token` is an opaque index into that node's allocation table, not an
/// address. Valid between allocate and free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteBufferHandle {
    pub node: NodeId,
    pub token: u64,
    pub count: u64,
    pub elem_size: u64,
}

impl RemoteBufferHandle {
    /// Wire size: four u64 fields.
    pub const ENCODED_LEN: usize = 32;

    pub fn byte_len(&self) -> u64 {
        self.count.saturating_mul(self.elem_size)
    }
}

type Buffer = Arc<Mutex<Vec<u8>>>;

/// Live allocations of one node. Tokens start at 1 and are never reused.
#[derive(Default)]
pub(crate) struct AllocationTable {
    next_token: u64,
    live: HashMap<u64, Buffer>,
}

fn invalid(token: u64) -> RemoteError {
    RemoteError::new(RemoteErrorKind::InvalidToken, format!("no live allocation with token {token}"))
}

impl AllocationTable {
    pub(crate) fn allocate(&mut self, count: u64, elem_size: u64, limit: usize) -> Result<u64, RemoteError> {
        let failed = |why: String| RemoteError::new(RemoteErrorKind::AllocationFailed, why);
        let len = count
            .checked_mul(elem_size)
            .filter(|&n| n <= limit as u64)
            .ok_or_else(|| failed(format!("{count} x {elem_size} bytes exceeds the limit of {limit}")))?;
        let mut bytes = Vec::new();
        bytes
            .try_reserve_exact(len as usize)
            .map_err(|e| failed(e.to_string()))?;
        bytes.resize(len as usize, 0);
        self.next_token += 1;
        self.live.insert(self.next_token, Arc::new(Mutex::new(bytes)));
        Ok(self.next_token)
    }

    pub(crate) fn free(&mut self, token: u64) -> Result<(), RemoteError> {
        self.live.remove(&token).map(drop).ok_or_else(|| invalid(token))
    }

    pub(crate) fn buffer(&self, token: u64) -> Result<Buffer, RemoteError> {
        self.live.get(&token).cloned().ok_or_else(|| invalid(token))
    }

    pub(crate) fn live(&self) -> usize {
        self.live.len()
    }
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<Shared>>> = const { RefCell::new(None) };
}

/// Runs `f` with `shared` as the node whose buffers [`local`] functions see.
pub(crate) fn with_current<T>(shared: &Arc<Shared>, f: impl FnOnce() -> T) -> T {
    let prev = CURRENT.with(|c| c.replace(Some(shared.clone())));
    let out = f();
    CURRENT.with(|c| *c.borrow_mut() = prev);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocalError {
    #[error("not running inside a remote function")]
    NoContext,
    #[error("buffer lives on {owner}, this is {here}")]
    WrongNode { owner: NodeId, here: NodeId },
    #[error("no live allocation with token {0}")]
    InvalidToken(u64),
    #[error("buffer holds {expected} bytes, got {got}")]
    SizeMismatch { expected: u64, got: u64 },
}

/// Access to this node's buffers from inside a remote function.
///
/// Data is copied in and out; two handles naming the same buffer are fine.
pub mod local {
    use super::*;

    fn buffer(handle: &RemoteBufferHandle) -> Result<Buffer, LocalError> {
        CURRENT.with(|c| {
            let current = c.borrow();
            let shared = current.as_ref().ok_or(LocalError::NoContext)?;
            if handle.node != shared.node {
                return Err(LocalError::WrongNode {
                    owner: handle.node,
                    here: shared.node,
                });
            }
            let table = shared.allocations.lock().unwrap();
            table.buffer(handle.token).map_err(|_| LocalError::InvalidToken(handle.token))
        })
    }

    /// The node executing the current remote function.
    pub fn node() -> Option<NodeId> {
        CURRENT.with(|c| c.borrow().as_ref().map(|s| s.node))
    }

    pub fn read(handle: &RemoteBufferHandle) -> Result<Vec<u8>, LocalError> {
        Ok(buffer(handle)?.lock().unwrap().clone())
    }

    pub fn write(handle: &RemoteBufferHandle, bytes: &[u8]) -> Result<(), LocalError> {
        let buffer = buffer(handle)?;
        let mut data = buffer.lock().unwrap();
        if data.len() != bytes.len() {
            return Err(LocalError::SizeMismatch {
                expected: data.len() as u64,
                got: bytes.len() as u64,
            });
        }
        data.copy_from_slice(bytes);
        Ok(())
    }

    /// Reads the buffer as little-endian f64 values.
    pub fn read_f64(handle: &RemoteBufferHandle) -> Result<Vec<f64>, LocalError> {
        Ok(read(handle)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn write_f64(handle: &RemoteBufferHandle, values: &[f64]) -> Result<(), LocalError> {
        write(handle, &f64_bytes(values))
    }
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_fresh() {
        let mut t = AllocationTable::default();
        let a = t.allocate(4, 8, 1 << 20).unwrap();
        let b = t.allocate(0, 8, 1 << 20).unwrap();
        assert_ne!(a, b);
        assert_eq!(t.buffer(a).unwrap().lock().unwrap().len(), 32);
        assert!(t.buffer(b).unwrap().lock().unwrap().is_empty());
        t.free(a).unwrap();
        assert_eq!(t.free(a).unwrap_err().kind, RemoteErrorKind::InvalidToken);
        let c = t.allocate(1, 1, 1 << 20).unwrap();
        assert!(c > b);
        assert_eq!(t.live(), 2);
    }

    #[test]
    fn oversized_allocation_fails() {
        let mut t = AllocationTable::default();
        assert_eq!(t.allocate(u64::MAX, 2, 1 << 20).unwrap_err().kind, RemoteErrorKind::AllocationFailed);
        assert_eq!(t.allocate(1 << 20, 2, 1 << 20).unwrap_err().kind, RemoteErrorKind::AllocationFailed);
        assert_eq!(t.live(), 0);
    }

    #[test]
    fn local_access_needs_context() {
        let h = RemoteBufferHandle {
            node: NodeId(0),
            token: 1,
            count: 1,
            elem_size: 1,
        };
        assert_eq!(local::read(&h), Err(LocalError::NoContext));
        assert_eq!(local::node(), None);
    }

    #[test]
    fn f64_layout() {
        let v = [1.5, -0.0, f64::MAX];
        assert_eq!(f64_values(&f64_bytes(&v)), v);
        assert_eq!(&f64_bytes(&[1.0])[..], &1.0f64.to_le_bytes());
    }
}

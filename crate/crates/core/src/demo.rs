//! The inner-product offload example: allocate two vectors on a target, copy
//! the data over, compute remotely, compare with a local loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runtime::{f64_bytes, OffloadError, Runtime};
use crate::suite::{dot, Suite};
use crate::transport::NodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerProd {
    pub n: usize,
    pub remote: f64,
    pub local: f64,
}

impl InnerProd {
    /// Bit-level equality, so that `-0.0` vs `0.0` or NaN payloads count.
    pub fn exact(&self) -> bool {
        self.remote.to_bits() == self.local.to_bits()
    }
}

/// Seeded input vectors with values in `[0, 1)`.
pub fn inputs(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..n).map(|_| rng.gen()).collect();
    let b = (0..n).map(|_| rng.gen()).collect();
    (a, b)
}

/// Offloads `a · b` to `target`. Both buffers are freed afterwards.
pub fn inner_prod_of(
    rt: &Runtime,
    suite: &Suite,
    target: NodeId,
    a: &[f64],
    b: &[f64],
) -> Result<InnerProd, OffloadError> {
    let n = a.len().min(b.len());
    let a_target = rt.allocate(target, n as u64, 8)?;
    let b_target = rt.allocate(target, n as u64, 8)?;
    let a_put = rt.put(&f64_bytes(&a[..n]), &a_target)?;
    let b_put = rt.put(&f64_bytes(&b[..n]), &b_target)?;
    a_put.get()?;
    b_put.get()?;
    let remote = rt
        .async_offload(target, &suite.inner_prod.make_closure((a_target, b_target, n as u64)))?
        .get();
    rt.free(&a_target)?;
    rt.free(&b_target)?;
    Ok(InnerProd {
        n,
        remote: remote?,
        local: dot(a, b, n),
    })
}

pub fn demo_inner_prod(rt: &Runtime, suite: &Suite, target: NodeId, n: usize, seed: u64) -> Result<InnerProd, OffloadError> {
    let (a, b) = inputs(n, seed);
    inner_prod_of(rt, suite, target, &a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::cluster::{Backend, LocalCluster};
    use crate::suite::{register, Order};
    use std::sync::Mutex;

    #[test]
    fn inner_product_examples() {
        for backend in [Backend::Loopback, Backend::Tcp] {
            let slot = Mutex::new(None);
            let c = LocalCluster::start(backend, 2, Default::default(), |node, reg| {
                let order = if node.0 == 0 { Order::Forward } else { Order::Reversed };
                let s = register(reg, order)?;
                slot.lock().unwrap().get_or_insert(s);
                Ok(())
            })
            .unwrap();
            let suite = slot.into_inner().unwrap().unwrap();
            let t = NodeId(1);
            let r = inner_prod_of(c.host(), &suite, t, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
            assert_eq!(r.remote, 32.0);
            let r = demo_inner_prod(c.host(), &suite, t, 0, 1).unwrap();
            assert_eq!(r.remote.to_bits(), 0.0f64.to_bits());
            let r = demo_inner_prod(c.host(), &suite, t, 1024, 7).unwrap();
            assert!(r.exact(), "{r:?}");
            assert_eq!(c.host().live_allocations(t), Ok(0));
            assert!(c.finish().unwrap().is_clean());
        }
    }
}

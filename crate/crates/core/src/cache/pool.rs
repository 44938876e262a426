use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub reuses: u64,
    pub allocations: u64,
    pub outstanding: u64,
    pub peak_outstanding: u64,
}

/// Shape-keyed free lists of tensors.
#[derive(Debug, Default)]
pub struct BufferPool {
    free: HashMap<Shape4, Vec<Tensor4>>,
    stats: PoolStats,
}

impl BufferPool {
    /// Zeroed tensor of `shape`, reusing a released one when available.
    pub fn acquire(&mut self, shape: Shape4) -> Tensor4 {
        let t = match self.free.get_mut(&shape).and_then(Vec::pop) {
            Some(mut t) => {
                t.data_mut().fill(0.0);
                self.stats.reuses += 1;
                t
            }
            None => {
                self.stats.allocations += 1;
                Tensor4::zeros(shape)
            }
        };
        self.stats.outstanding += 1;
        self.stats.peak_outstanding = self.stats.peak_outstanding.max(self.stats.outstanding);
        t
    }

    pub fn release(&mut self, t: Tensor4) {
        self.stats.outstanding = self.stats.outstanding.saturating_sub(1);
        self.free.entry(t.shape()).or_default().push(t);
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }
}

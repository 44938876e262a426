//! Activation cache: per-step, per-layer tensors and statistics kept across
//! generations, with a memory tier, a file-backed cold tier, background
//! prefetch, mask-aware compaction and a shape-keyed buffer pool.

mod key;
mod payload;
mod pool;
pub mod spill;
mod store;

pub use key::{CacheKey, Role};
pub use payload::{CompactTensor, Payload, COMPACT_MAGIC};
pub use pool::{BufferPool, PoolStats};
pub use store::{CacheStats, CacheStore, CompactionReport, StoreConfig, Tier};

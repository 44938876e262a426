//! Mask-restricted kernels: block planning, gather/scatter convolution,
//! cached-statistics normalization and gathered attention.
//!
//! Every op starts from the layer's cached output and only overwrites
//! positions whose mask bit is set, so inactive positions stay bit-identical
//! to the previous generation.

mod context;
mod ops;
mod plan;

pub use context::{ResolutionGate, SparseLayerContext};
pub use ops::{approx_group_norm, sparse_conv, sparse_conv_with, sparse_cross_attention, sparse_self_attention};
pub use plan::{apsc_select, gather, gather_into, GatherPlan, DEFAULT_BLOCK_CANDIDATES};

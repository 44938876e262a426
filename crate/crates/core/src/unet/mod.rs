//! Toy text-conditioned U-Net and the generate → detect → sparse-edit flow.

mod config;
mod exec;
mod model;
mod pipeline;
mod prompt;

pub use config::{UNetConfig, LATENT_SIZES};
pub use exec::{ControlledExec, DenseExec, SparseExec, SparseSchedule};
pub use model::{cross_attention_macs, self_attention_macs, LayerExec, LayerInfo, LayerKind, LayerRef, ToyUNet};
pub use pipeline::{
    edit, generate_dense, latent_key, Detection, EditOutcome, EditSession, ForwardMode, Generation, MaskSource,
    Pipeline, LATENT_LAYER,
};
pub use prompt::{token_embedding, PromptTokens, SharedTokenMap};

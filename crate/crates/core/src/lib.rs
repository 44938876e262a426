//! Mask-driven incremental re-generation for a toy latent diffusion U-Net.
//!
//! A full generation records per-layer activations in a [`cache::CacheStore`].
//! An edit with a changed prompt detects the affected region, then reruns the
//! U-Net only on that region and reuses cached values everywhere else.

pub mod bench;
pub mod cache;
pub mod error;
pub mod mask;
pub mod sparse;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};

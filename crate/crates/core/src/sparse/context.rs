use crate::cache::{CacheKey, Role};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{GroupStats, Shape4, Tensor4};

/// Spatial-area threshold, relative to the latent plane, at or above which a
/// layer runs sparsely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolutionGate {
    pub fraction: f64,
}

impl Default for ResolutionGate {
    fn default() -> Self {
        ResolutionGate { fraction: 0.25 }
    }
}

impl ResolutionGate {
    pub fn passes(&self, layer: (usize, usize), latent: (usize, usize)) -> bool {
        (layer.0 * layer.1) as f64 >= self.fraction * (latent.0 * latent.1) as f64
    }
}

/// Previous-generation state a sparse layer falls back on outside the mask.
#[derive(Clone, Debug, Default)]
pub struct SparseLayerContext {
    pub step: u32,
    pub layer_id: u32,
    /// The layer's output in the previous generation; the scatter base.
    pub cached_output: Option<Tensor4>,
    /// Normalization statistics from the previous generation.
    pub cached_stats: Option<GroupStats>,
    pub mask_level: usize,
    pub gated: bool,
}

impl SparseLayerContext {
    pub fn new(step: u32, layer_id: u32) -> Self {
        SparseLayerContext {
            step,
            layer_id,
            gated: true,
            ..Default::default()
        }
    }

    pub fn with_output(mut self, t: Tensor4) -> Self {
        self.cached_output = Some(t);
        self
    }

    pub fn with_stats(mut self, s: GroupStats) -> Self {
        self.cached_stats = Some(s);
        self
    }

    pub(crate) fn key(&self, role: Role) -> CacheKey {
        CacheKey::new(self.step, self.layer_id, role)
    }

    /// Copy of the cached output to scatter into. A full mask overwrites every
    /// pixel, so it may start from zeros when nothing is cached.
    pub(crate) fn base_output(&self, expected: Shape4, mask: &BinaryMask) -> Result<Tensor4> {
        match &self.cached_output {
            Some(t) => {
                t.check_shape("cached layer output", expected)?;
                Ok(t.clone())
            }
            None if mask.is_full() => Ok(Tensor4::zeros(expected)),
            None => Err(Error::CacheMiss(self.key(Role::LayerOutput))),
        }
    }

    pub(crate) fn require_gate(&self, op: &str) -> Result<()> {
        if !self.gated {
            return Err(Error::contract(format!(
                "{op} called on layer {} below the resolution gate; use the dense kernel",
                self.layer_id
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_mask(op: &'static str, input: Shape4, mask: &BinaryMask) -> Result<()> {
    if (input.h, input.w) != mask.dims() {
        return Err(Error::shape(op, input, mask.dims()));
    }
    Ok(())
}

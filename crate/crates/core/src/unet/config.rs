use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::ResolutionGate;

pub const LATENT_SIZES: [usize; 4] = [32, 64, 96, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Latent height and width.
    pub latent: [usize; 2],
    pub latent_channels: usize,
    /// Channels per resolution level; level `l` runs at `latent / 2^l`.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub kernel: usize,
    /// Denoising steps `T`.
    pub steps: u32,
    /// Layers whose area is at least this fraction of the latent area run sparsely.
    pub gate_fraction: f64,
    pub text_dim: usize,
    pub seed: u64,
    pub eps: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent: [64, 64],
            latent_channels: 4,
            channels: vec![16, 32, 64],
            blocks_per_level: 1,
            groups: 4,
            kernel: 3,
            steps: 20,
            gate_fraction: 0.25,
            text_dim: 32,
            seed: 0,
            eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of level `l`.
    pub fn level_dims(&self, l: usize) -> (usize, usize) {
        (self.latent[0] >> l, self.latent[1] >> l)
    }

    pub fn level_gated(&self, l: usize) -> bool {
        ResolutionGate {
            fraction: self.gate_fraction,
        }
        .passes(self.level_dims(l), self.level_dims(0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for d in self.latent {
            if !LATENT_SIZES.contains(&d) {
                return bad(format!("latent size {d} not in {LATENT_SIZES:?}"));
            }
        }
        if self.channels.is_empty() {
            return bad("channels must list at least one level".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            return bad(format!("channel count {c} is not a positive multiple of {} groups", self.groups));
        }
        let f = 1usize << (self.levels() - 1);
        if self.latent[0] % f != 0 || self.latent[1] % f != 0 {
            return bad(format!(
                "latent {:?} is not divisible by 2^{}",
                self.latent,
                self.levels() - 1
            ));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.steps == 0 || self.blocks_per_level == 0 || self.latent_channels == 0 || self.text_dim == 0 {
            return bad("steps, blocks_per_level, latent_channels and text_dim must be positive".into());
        }
        if !(self.gate_fraction > 0.0 && self.gate_fraction <= 1.0) {
            return bad(format!("gate_fraction {} must lie in (0, 1]", self.gate_fraction));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }
}

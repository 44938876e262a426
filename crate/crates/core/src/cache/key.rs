use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LayerOutput,
    NormMean,
    NormVar,
    CrossAttnMap,
    StepLatent,
    LayerInput,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::LayerOutput,
        Role::NormMean,
        Role::NormVar,
        Role::CrossAttnMap,
        Role::StepLatent,
        Role::LayerInput,
    ];

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(code: u64) -> Result<Role> {
        Role::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown cache role code {code}")))
    }

    /// Spatial roles that compaction may shrink.
    pub fn is_spatial_activation(self) -> bool {
        matches!(self, Role::LayerOutput | Role::LayerInput)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::LayerOutput => "layer_output",
            Role::NormMean => "norm_mean",
            Role::NormVar => "norm_var",
            Role::CrossAttnMap => "cross_attn_map",
            Role::StepLatent => "step_latent",
            Role::LayerInput => "layer_input",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub step: u32,
    pub layer_id: u32,
    pub role: Role,
}

impl CacheKey {
    pub fn new(step: u32, layer_id: u32, role: Role) -> Self {
        CacheKey { step, layer_id, role }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(step {}, layer {}, {})", self.step, self.layer_id, self.role.name())
    }
}

use serde::{Deserialize, Serialize};

use super::{ConvWeights, Shape4};

/// Multiply-accumulates of a convolution evaluated at `active_output_pixels`
/// output positions per sample.
pub fn macs_conv(input: Shape4, weights: &ConvWeights, active_output_pixels: u64) -> u64 {
    let (kh, kw) = weights.kernel();
    active_output_pixels * (weights.c_out() * input.c * kh * kw) as u64
}

/// Scores plus weighted sum: `2 · q · kv · dim`.
pub fn macs_attention(q_tokens: u64, kv_tokens: u64, dim: u64) -> u64 {
    2 * q_tokens * kv_tokens * dim
}

pub fn macs_linear(tokens: u64, in_dim: u64, out_dim: u64) -> u64 {
    tokens * in_dim * out_dim
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer_id: u32,
    pub name: String,
    pub dense_macs: u64,
    pub sparse_macs: u64,
}

/// Per-layer dense vs. executed MAC counts, additive over calls.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsReport {
    pub layers: Vec<LayerMacs>,
}

impl MacsReport {
    pub fn with_layers<'a>(names: impl IntoIterator<Item = (u32, &'a str)>) -> Self {
        MacsReport {
            layers: names
                .into_iter()
                .map(|(layer_id, name)| LayerMacs {
                    layer_id,
                    name: name.to_string(),
                    dense_macs: 0,
                    sparse_macs: 0,
                })
                .collect(),
        }
    }

    fn entry(&mut self, layer_id: u32) -> &mut LayerMacs {
        if let Some(i) = self.layers.iter().position(|l| l.layer_id == layer_id) {
            return &mut self.layers[i];
        }
        self.layers.push(LayerMacs {
            layer_id,
            name: format!("layer{layer_id}"),
            dense_macs: 0,
            sparse_macs: 0,
        });
        self.layers.last_mut().unwrap()
    }

    pub fn add(&mut self, layer_id: u32, dense: u64, sparse: u64) {
        let e = self.entry(layer_id);
        e.dense_macs += dense;
        e.sparse_macs += sparse;
    }

    pub fn merge(&mut self, other: &MacsReport) {
        for l in &other.layers {
            self.add(l.layer_id, l.dense_macs, l.sparse_macs);
        }
    }

    pub fn dense_total(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_macs).sum()
    }

    pub fn sparse_total(&self) -> u64 {
        self.layers.iter().map(|l| l.sparse_macs).sum()
    }

    /// `dense_total / sparse_total`; `None` when nothing was executed.
    pub fn ratio(&self) -> Option<f64> {
        let s = self.sparse_total();
        (s > 0).then(|| self.dense_total() as f64 / s as f64)
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::UNetConfig;
use crate::error::Result;
use crate::tensor::{
    macs_attention, macs_conv, macs_linear, silu, AttentionWeights, ConvWeights, Linear, MacsReport, Matrix, Shape4,
    Tensor4,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Norm,
    SelfAttn,
    CrossAttn,
}

/// Static description of one cached layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: u32,
    pub name: String,
    pub kind: LayerKind,
    pub level: usize,
    pub dims: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
}

pub fn self_attention_macs(tokens: u64, c: u64) -> u64 {
    4 * macs_linear(tokens, c, c) + macs_attention(tokens, tokens, c)
}

/// Query and output projections of the image tokens, key/value projections
/// of the text, and the attention itself.
pub fn cross_attention_macs(tokens: u64, c: u64, text_len: u64, text_dim: u64) -> u64 {
    if tokens == 0 {
        return 0;
    }
    2 * macs_linear(tokens, c, c) + 2 * macs_linear(text_len, text_dim, c) + macs_attention(tokens, text_len, c)
}

impl LayerInfo {
    /// Multiply-accumulates of one dense evaluation on a single sample.
    /// Normalization is not counted.
    pub fn dense_macs(&self, kernel: usize, text_len: usize, text_dim: usize) -> u64 {
        let a = (self.dims.0 * self.dims.1) as u64;
        let c = self.c_out as u64;
        match self.kind {
            LayerKind::Conv => a * (self.c_in * self.c_out * kernel * kernel) as u64,
            LayerKind::Norm => 0,
            LayerKind::SelfAttn => self_attention_macs(a, c),
            LayerKind::CrossAttn => cross_attention_macs(a, c, text_len as u64, text_dim as u64),
        }
    }
}

/// Identifies a layer to an executor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRef {
    pub id: u32,
    pub level: usize,
}

/// Evaluation strategy for the cached layers of one U-Net call.
pub trait LayerExec {
    fn conv(&mut self, layer: LayerRef, w: &ConvWeights, x: &Tensor4) -> Result<Tensor4>;
    fn norm(&mut self, layer: LayerRef, groups: usize, gamma: &[f32], beta: &[f32], eps: f32, x: &Tensor4)
        -> Result<Tensor4>;
    fn self_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4) -> Result<Tensor4>;
    fn cross_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4, text: &Matrix) -> Result<Tensor4>;
}

pub(crate) fn conv_exec_macs(w: &ConvWeights, x: Shape4, active: u64) -> u64 {
    macs_conv(x, w, active) * x.n as u64
}

struct Block {
    conv: ConvWeights,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    sa: AttentionWeights,
    ca: AttentionWeights,
    ids: [u32; 4],
    level: usize,
}

struct Init {
    rng: ChaCha8Rng,
    layers: Vec<LayerInfo>,
}

impl Init {
    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }

    fn linear(&mut self, i: usize, o: usize) -> Linear {
        let b = 1.0 / (i as f32).sqrt();
        let w = Matrix::new(o, i, self.uniform(o * i, b)).expect("sized");
        Linear::new(w, self.uniform(o, 0.1 * b)).expect("sized")
    }

    fn conv(&mut self, ci: usize, co: usize, k: usize) -> ConvWeights {
        let b = 1.0 / ((ci * k * k) as f32).sqrt();
        let w = Tensor4::new(Shape4::new(co, ci, k, k), self.uniform(co * ci * k * k, b)).expect("sized");
        ConvWeights::new(w, self.uniform(co, 0.1 * b)).expect("odd kernel")
    }

    fn attn(&mut self, c: usize, ctx: usize) -> AttentionWeights {
        AttentionWeights {
            to_q: self.linear(c, c),
            to_k: self.linear(ctx, c),
            to_v: self.linear(ctx, c),
            to_out: self.linear(c, c),
        }
    }

    fn register(&mut self, name: String, kind: LayerKind, level: usize, dims: (usize, usize), ci: usize, co: usize) -> u32 {
        let id = self.layers.len() as u32;
        self.layers.push(LayerInfo {
            id,
            name,
            kind,
            level,
            dims,
            c_in: ci,
            c_out: co,
        });
        id
    }

    fn block(&mut self, cfg: &UNetConfig, tag: &str, level: usize, ci: usize, co: usize) -> Block {
        let dims = cfg.level_dims(level);
        let ids = [
            self.register(format!("{tag}.conv"), LayerKind::Conv, level, dims, ci, co),
            self.register(format!("{tag}.norm"), LayerKind::Norm, level, dims, co, co),
            self.register(format!("{tag}.self_attn"), LayerKind::SelfAttn, level, dims, co, co),
            self.register(format!("{tag}.cross_attn"), LayerKind::CrossAttn, level, dims, co, co),
        ];
        let conv = self.conv(ci, co, cfg.kernel);
        let gamma = self.uniform(co, 0.1).into_iter().map(|g| 1.0 + g).collect();
        let beta = self.uniform(co, 0.1);
        let sa = self.attn(co, co);
        let ca = self.attn(co, cfg.text_dim);
        Block {
            conv,
            gamma,
            beta,
            sa,
            ca,
            ids,
            level,
        }
    }
}

/// Small deterministic U-Net: a resolution pyramid of
/// conv → group norm → SiLU → self-attention → cross-attention blocks with
/// average-pool downsampling, nearest upsampling and concatenated skips.
/// Weights are seeded pseudo-random values; nothing is learned.
pub struct ToyUNet {
    config: UNetConfig,
    conv_in: ConvWeights,
    conv_in_id: u32,
    down: Vec<Vec<Block>>,
    mid: Block,
    up: Vec<Vec<Block>>,
    conv_out: ConvWeights,
    conv_out_id: u32,
    layers: Vec<LayerInfo>,
}

impl ToyUNet {
    /// Builds the network; `config` must already be validated.
    pub fn new(config: &UNetConfig) -> Self {
        let cfg = config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            layers: Vec::new(),
        };
        let ch = &cfg.channels;
        let levels = ch.len();
        let c0 = ch[0];
        let conv_in_id = init.register("conv_in".into(), LayerKind::Conv, 0, cfg.level_dims(0), cfg.latent_channels, c0);
        let conv_in = init.conv(cfg.latent_channels, c0, cfg.kernel);

        let mut down = Vec::with_capacity(levels);
        let mut prev = c0;
        for (l, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(init.block(cfg, &format!("down{l}.{b}"), l, prev, c));
                prev = c;
            }
            down.push(blocks);
        }
        let mid = init.block(cfg, "mid", levels - 1, prev, prev);

        let mut up: Vec<Vec<Block>> = (0..levels).map(|_| Vec::new()).collect();
        for l in (0..levels - 1).rev() {
            let mut ci = prev + ch[l];
            for b in 0..cfg.blocks_per_level {
                up[l].push(init.block(cfg, &format!("up{l}.{b}"), l, ci, ch[l]));
                ci = ch[l];
            }
            prev = ch[l];
        }
        let conv_out_id = init.register("conv_out".into(), LayerKind::Conv, 0, cfg.level_dims(0), c0, cfg.latent_channels);
        let conv_out = init.conv(c0, cfg.latent_channels, cfg.kernel);
        ToyUNet {
            config: cfg.clone(),
            conv_in,
            conv_in_id,
            down,
            mid,
            up,
            conv_out,
            conv_out_id,
            layers: init.layers,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Layers in execution order; `layers()[i].id == i`.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn latent_shape(&self) -> Shape4 {
        let c = &self.config;
        Shape4::new(1, c.latent_channels, c.latent[0], c.latent[1])
    }

    /// Per-layer cost of one dense call; `sparse_macs` is left at zero.
    pub fn dense_macs(&self, text_len: usize) -> MacsReport {
        let mut r = MacsReport::with_layers(self.layers.iter().map(|l| (l.id, l.name.as_str())));
        for l in &self.layers {
            r.add(l.id, l.dense_macs(self.config.kernel, text_len, self.config.text_dim), 0);
        }
        r
    }

    /// Sinusoidal step embedding, scaled down so it perturbs rather than
    /// dominates the features.
    pub fn time_embedding(&self, t: u32) -> Vec<f32> {
        let c = self.config.channels[0];
        let half = c / 2;
        let mut e = vec![0.0f32; c];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            e[2 * i] = 0.1 * arg.sin() as f32;
            e[2 * i + 1] = 0.1 * arg.cos() as f32;
        }
        e
    }

    fn block(&self, exec: &mut dyn LayerExec, b: &Block, x: &Tensor4, text: &Matrix) -> Result<Tensor4> {
        let at = |i: usize| LayerRef {
            id: b.ids[i],
            level: b.level,
        };
        let cfg = &self.config;
        let h = exec.conv(at(0), &b.conv, x)?;
        let g = exec.norm(at(1), cfg.groups, &b.gamma, &b.beta, cfg.eps, &h)?;
        let s = g.map(silu);
        let a = exec.self_attn(at(2), &b.sa, &s)?;
        exec.cross_attn(at(3), &b.ca, &a, text)
    }

    /// One denoiser evaluation at step `t`, returning the latent update.
    pub fn forward(&self, exec: &mut dyn LayerExec, latent: &Tensor4, t: u32, text: &Matrix) -> Result<Tensor4> {
        latent.check_shape("unet input", self.latent_shape())?;
        let levels = self.config.levels();
        let mut x = exec.conv(
            LayerRef {
                id: self.conv_in_id,
                level: 0,
            },
            &self.conv_in,
            latent,
        )?;
        let temb = self.time_embedding(t);
        for n in 0..x.shape().n {
            for (c, &e) in temb.iter().enumerate() {
                for v in x.plane_mut(n, c) {
                    *v += e;
                }
            }
        }
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            for b in &self.down[l] {
                x = self.block(exec, b, &x, text)?;
            }
            if l + 1 < levels {
                skips.push(x.clone());
                x = x.avg_pool2()?;
            }
        }
        x = self.block(exec, &self.mid, &x, text)?;
        for l in (0..levels - 1).rev() {
            x = x.upsample2().concat_channels(&skips[l])?;
            for b in &self.up[l] {
                x = self.block(exec, b, &x, text)?;
            }
        }
        exec.conv(
            LayerRef {
                id: self.conv_out_id,
                level: 0,
            },
            &self.conv_out,
            &x,
        )
    }
}

//! Layer executors: dense (optionally recording into the cache), controlled
//! (dense with cached cross-attention columns) and sparse.

use super::model::{conv_exec_macs, cross_attention_macs, self_attention_macs, LayerExec, LayerRef};
use super::prompt::SharedTokenMap;
use crate::cache::{CacheKey, CacheStore, Payload, Role};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskPyramid};
use crate::sparse::{
    apsc_select, approx_group_norm, sparse_conv_with, sparse_cross_attention, sparse_self_attention, GatherPlan,
    SparseLayerContext, DEFAULT_BLOCK_CANDIDATES,
};
use crate::tensor::{
    conv2d, cross_attention_block, group_norm, self_attention_block, AttentionWeights, ConvWeights, GroupStats,
    MacsReport, Matrix, Shape4, Tensor4,
};

use super::config::UNetConfig;

fn plane_tokens(x: &Tensor4) -> u64 {
    x.shape().plane() as u64
}

fn dense_sa_macs(w: &AttentionWeights, x: &Tensor4) -> u64 {
    x.shape().n as u64 * self_attention_macs(plane_tokens(x), w.dim() as u64)
}

fn ca_macs(w: &AttentionWeights, tokens: u64, n: usize, text: &Matrix) -> u64 {
    n as u64 * cross_attention_macs(tokens, w.dim() as u64, text.rows as u64, text.cols as u64)
}

/// Reference evaluation. With `record` set, every layer output, the
/// normalization statistics and the cross-attention maps are stored under
/// `step`, replacing earlier entries.
pub struct DenseExec<'a> {
    pub step: u32,
    pub record: Option<&'a CacheStore>,
    pub macs: MacsReport,
}

impl<'a> DenseExec<'a> {
    pub fn new(step: u32, record: Option<&'a CacheStore>) -> Self {
        DenseExec {
            step,
            record,
            macs: MacsReport::default(),
        }
    }

    fn put(&self, id: u32, role: Role, p: impl FnOnce() -> Payload) -> Result<()> {
        match self.record {
            Some(s) => s.overwrite(CacheKey::new(self.step, id, role), p()),
            None => Ok(()),
        }
    }
}

impl LayerExec for DenseExec<'_> {
    fn conv(&mut self, layer: LayerRef, w: &ConvWeights, x: &Tensor4) -> Result<Tensor4> {
        let out = conv2d(x, w)?;
        self.macs.add(layer.id, 0, conv_exec_macs(w, x.shape(), plane_tokens(x)));
        self.put(layer.id, Role::LayerOutput, || Payload::Tensor(out.clone()))?;
        Ok(out)
    }

    fn norm(&mut self, layer: LayerRef, groups: usize, gamma: &[f32], beta: &[f32], eps: f32, x: &Tensor4) -> Result<Tensor4> {
        let o = group_norm(x, groups, gamma, beta, eps)?;
        self.put(layer.id, Role::LayerOutput, || Payload::Tensor(o.output.clone()))?;
        self.put(layer.id, Role::NormMean, || Payload::Stats(o.stats.mean.clone()))?;
        self.put(layer.id, Role::NormVar, || Payload::Stats(o.stats.var.clone()))?;
        Ok(o.output)
    }

    fn self_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4) -> Result<Tensor4> {
        let out = self_attention_block(x, w)?;
        self.macs.add(layer.id, 0, dense_sa_macs(w, x));
        self.put(layer.id, Role::LayerOutput, || Payload::Tensor(out.clone()))?;
        Ok(out)
    }

    fn cross_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4, text: &Matrix) -> Result<Tensor4> {
        let s = x.shape();
        self.macs.add(layer.id, 0, ca_macs(w, plane_tokens(x), s.n, text));
        if self.record.is_none() {
            return cross_attention_block(x, w, text, None);
        }
        let mut map = Tensor4::zeros(Shape4::new(s.n, 1, s.plane(), text.rows));
        let mut capture = |n: usize, probs: &mut Matrix| -> Result<()> {
            map.plane_mut(n, 0).copy_from_slice(&probs.data);
            Ok(())
        };
        let out = cross_attention_block(x, w, text, Some(&mut capture))?;
        self.put(layer.id, Role::LayerOutput, || Payload::Tensor(out.clone()))?;
        self.put(layer.id, Role::CrossAttnMap, || Payload::Tensor(map))?;
        Ok(out)
    }
}

/// Dense evaluation in which every cross-attention map column of a shared
/// token is replaced by the cached column of its old position. Unless the
/// substitution covers every column, rows are renormalized to sum to one.
pub struct ControlledExec<'a> {
    pub step: u32,
    pub store: &'a CacheStore,
    pub shared: &'a SharedTokenMap,
    /// Skip renormalization: the cached rows are used verbatim.
    pub complete: bool,
    pub macs: MacsReport,
}

impl LayerExec for ControlledExec<'_> {
    fn conv(&mut self, layer: LayerRef, w: &ConvWeights, x: &Tensor4) -> Result<Tensor4> {
        let out = conv2d(x, w)?;
        self.macs.add(layer.id, 0, conv_exec_macs(w, x.shape(), plane_tokens(x)));
        Ok(out)
    }

    fn norm(&mut self, _: LayerRef, groups: usize, gamma: &[f32], beta: &[f32], eps: f32, x: &Tensor4) -> Result<Tensor4> {
        Ok(group_norm(x, groups, gamma, beta, eps)?.output)
    }

    fn self_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4) -> Result<Tensor4> {
        self.macs.add(layer.id, 0, dense_sa_macs(w, x));
        self_attention_block(x, w)
    }

    fn cross_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4, text: &Matrix) -> Result<Tensor4> {
        let s = x.shape();
        self.macs.add(layer.id, 0, ca_macs(w, plane_tokens(x), s.n, text));
        let cached = self.store.get_tensor(CacheKey::new(self.step, layer.id, Role::CrossAttnMap))?;
        let cs = cached.shape();
        if cs.n != s.n || cs.c != 1 || cs.h != s.plane() {
            return Err(Error::shape("cached cross-attention map", cs, s));
        }
        let old_len = cs.w;
        if let Some(&(i, j)) = self.shared.pairs.iter().find(|&&(i, j)| i >= old_len || j >= text.rows) {
            return Err(Error::contract(format!(
                "shared token pair ({i}, {j}) out of range for {old_len} old and {} new tokens",
                text.rows
            )));
        }
        let pairs = &self.shared.pairs;
        let complete = self.complete;
        let mut substitute = |n: usize, probs: &mut Matrix| -> Result<()> {
            let src = cached.plane(n, 0);
            for r in 0..probs.rows {
                let row = probs.row_mut(r);
                for &(i, j) in pairs {
                    row[j] = src[r * old_len + i];
                }
                if !complete {
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    for v in row.iter_mut() {
                        *v = (*v as f64 / sum) as f32;
                    }
                }
            }
            Ok(())
        };
        cross_attention_block(x, w, text, Some(&mut substitute))
    }
}

/// Per-level masks and block plans of a sparse edit, built once per mask.
#[derive(Clone, Debug)]
pub struct SparseSchedule {
    pub pyramid: MaskPyramid,
    /// `Some` for levels above the resolution gate.
    pub plans: Vec<Option<GatherPlan>>,
}

impl SparseSchedule {
    pub fn build(config: &UNetConfig, mask: &BinaryMask) -> Result<Self> {
        let pyramid = crate::mask::build_pyramid(mask, config.levels())?;
        let plans = (0..config.levels())
            .map(|l| {
                config
                    .level_gated(l)
                    .then(|| apsc_select(pyramid.level(l), (config.kernel, config.kernel), &DEFAULT_BLOCK_CANDIDATES))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(SparseSchedule { pyramid, plans })
    }

    pub fn gated(&self, level: usize) -> bool {
        self.plans[level].is_some()
    }

    pub fn mask(&self, level: usize) -> &BinaryMask {
        self.pyramid.level(level)
    }
}

/// Sparse evaluation on gated levels, dense below the gate.
pub struct SparseExec<'a> {
    pub step: u32,
    pub store: &'a CacheStore,
    pub schedule: &'a SparseSchedule,
    pub macs: MacsReport,
}

impl SparseExec<'_> {
    fn key(&self, id: u32, role: Role) -> CacheKey {
        CacheKey::new(self.step, id, role)
    }

    /// Context with the cached output as scatter base. A full mask overwrites
    /// every position, so nothing is read.
    fn context(&self, layer: LayerRef) -> Result<SparseLayerContext> {
        let mask = self.schedule.mask(layer.level);
        let mut ctx = SparseLayerContext::new(self.step, layer.id);
        ctx.mask_level = layer.level;
        if mask.is_full() {
            return Ok(ctx);
        }
        let key = self.key(layer.id, Role::LayerOutput);
        let p = self.store.get(key)?;
        if let Payload::Compacted(c) = &*p {
            let (h, w) = mask.dims();
            if c.shape().h != h || c.shape().w != w || (0..h * w).any(|i| !mask.get_index(i) && !c.covers(i)) {
                return Err(Error::contract(format!(
                    "cached entry {key} was compacted for a different mask"
                )));
            }
        }
        ctx.cached_output = Some(p.to_tensor()?);
        Ok(ctx)
    }
}

impl LayerExec for SparseExec<'_> {
    fn conv(&mut self, layer: LayerRef, w: &ConvWeights, x: &Tensor4) -> Result<Tensor4> {
        let Some(plan) = &self.schedule.plans[layer.level] else {
            self.macs.add(layer.id, 0, conv_exec_macs(w, x.shape(), plane_tokens(x)));
            return conv2d(x, w);
        };
        let ctx = self.context(layer)?;
        let mut buf = self.store.acquire_buffer(plan.gathered_shape(x.shape().n, x.shape().c));
        let out = sparse_conv_with(x, w, plan, &ctx, self.schedule.mask(layer.level), &mut buf);
        self.store.release_buffer(buf);
        self.macs.add(layer.id, 0, conv_exec_macs(w, x.shape(), plan.active_output_pixels()));
        out
    }

    fn norm(&mut self, layer: LayerRef, groups: usize, gamma: &[f32], beta: &[f32], eps: f32, x: &Tensor4) -> Result<Tensor4> {
        let mask = self.schedule.mask(layer.level);
        if !self.schedule.gated(layer.level) || mask.is_full() {
            return Ok(group_norm(x, groups, gamma, beta, eps)?.output);
        }
        let mut ctx = self.context(layer)?;
        ctx.cached_stats = Some(GroupStats {
            groups,
            mean: self.store.get_stats(self.key(layer.id, Role::NormMean))?,
            var: self.store.get_stats(self.key(layer.id, Role::NormVar))?,
        });
        approx_group_norm(x, &ctx, gamma, beta, eps, mask)
    }

    fn self_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4) -> Result<Tensor4> {
        if !self.schedule.gated(layer.level) {
            self.macs.add(layer.id, 0, dense_sa_macs(w, x));
            return self_attention_block(x, w);
        }
        let mask = self.schedule.mask(layer.level);
        let a = mask.active_count() as u64;
        self.macs.add(layer.id, 0, x.shape().n as u64 * self_attention_macs(a, w.dim() as u64));
        sparse_self_attention(x, w, &self.context(layer)?, mask)
    }

    fn cross_attn(&mut self, layer: LayerRef, w: &AttentionWeights, x: &Tensor4, text: &Matrix) -> Result<Tensor4> {
        let n = x.shape().n;
        if !self.schedule.gated(layer.level) {
            self.macs.add(layer.id, 0, ca_macs(w, plane_tokens(x), n, text));
            return cross_attention_block(x, w, text, None);
        }
        let mask = self.schedule.mask(layer.level);
        self.macs.add(layer.id, 0, ca_macs(w, mask.active_count() as u64, n, text));
        sparse_cross_attention(x, w, text, &self.context(layer)?, mask)
    }
}

use super::context::{check_mask, SparseLayerContext};
use super::plan::{gather_into, GatherPlan};
use crate::cache::Role;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{
    check_affine, conv_valid_block, norm_denom, normalize_value, AttentionWeights, ConvWeights, Matrix, Shape4, Tensor4,
};

/// Tiled convolution with pixel-wise scatter.
///
/// Starts from the cached output, convolves every gathered block and writes
/// back only output pixels whose mask bit is set. Pixels outside the mask keep
/// the cached bits; pixels inside equal [`conv2d`](crate::tensor::conv2d) exactly.
pub fn sparse_conv(
    input: &Tensor4,
    weights: &ConvWeights,
    plan: &GatherPlan,
    ctx: &SparseLayerContext,
    mask: &BinaryMask,
) -> Result<Tensor4> {
    let mut scratch = Tensor4::zeros(plan.gathered_shape(input.shape().n, input.shape().c));
    sparse_conv_with(input, weights, plan, ctx, mask, &mut scratch)
}

/// [`sparse_conv`] with a caller-provided gather buffer of
/// [`GatherPlan::gathered_shape`].
pub fn sparse_conv_with(
    input: &Tensor4,
    weights: &ConvWeights,
    plan: &GatherPlan,
    ctx: &SparseLayerContext,
    mask: &BinaryMask,
    gathered: &mut Tensor4,
) -> Result<Tensor4> {
    let s = input.shape();
    if s.c != weights.c_in() {
        return Err(Error::shape("sparse_conv", s, weights.weight().shape()));
    }
    check_mask("sparse_conv", s, mask)?;
    if plan.plane != mask.dims() || plan.kernel != weights.kernel() {
        return Err(Error::contract(format!(
            "plan for {:?} with kernel {:?} does not fit a {s} input and {:?} kernel",
            plan.plane,
            plan.kernel,
            weights.kernel()
        )));
    }
    let out_shape = Shape4::new(s.n, weights.c_out(), s.h, s.w);
    let mut out = ctx.base_output(out_shape, mask)?;
    if plan.is_empty() {
        return Ok(out);
    }
    gather_into(input, plan, gathered)?;
    let (bh, bw) = plan.block;
    let (th, tw) = plan.tile;
    let block_len = s.c * bh * bw;
    let mut tile_out = vec![0.0f32; weights.c_out() * th * tw];
    for (oi, &(oy, ox)) in plan.origins.iter().enumerate() {
        for n in 0..s.n {
            let b = oi * s.n + n;
            let block = &gathered.data()[b * block_len..(b + 1) * block_len];
            conv_valid_block(block, s.c, bh, bw, weights, &mut tile_out);
            for ty in 0..th {
                let y = oy + ty;
                if y >= s.h {
                    break;
                }
                for tx in 0..tw {
                    let x = ox + tx;
                    if x >= s.w {
                        break;
                    }
                    if !mask.get(y, x) {
                        continue;
                    }
                    for co in 0..weights.c_out() {
                        out.set(n, co, y, x, tile_out[(co * th + ty) * tw + tx]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Group normalization with statistics cached from the previous generation.
///
/// Active pixels are normalized with the cached mean/variance; no reduction
/// over the current input takes place. Inactive pixels copy the cached output.
pub fn approx_group_norm(
    input: &Tensor4,
    ctx: &SparseLayerContext,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    mask: &BinaryMask,
) -> Result<Tensor4> {
    let s = input.shape();
    check_mask("approx_group_norm", s, mask)?;
    let stats = ctx
        .cached_stats
        .as_ref()
        .ok_or_else(|| Error::CacheMiss(ctx.key(Role::NormMean)))?;
    check_affine(s.c, stats.groups, gamma, beta)?;
    if stats.mean.len() != s.n * stats.groups || stats.var.len() != stats.mean.len() {
        return Err(Error::contract(format!(
            "cached statistics hold {} groups, expected {}",
            stats.mean.len(),
            s.n * stats.groups
        )));
    }
    let mut out = ctx.base_output(s, mask)?;
    if mask.is_empty() {
        return Ok(out);
    }
    let pixels = mask.active_indices();
    let cpg = s.c / stats.groups;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = n * stats.groups + c / cpg;
            let (m, denom) = (stats.mean[g], norm_denom(stats.var[g], eps));
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for &p in &pixels {
                dst[p] = normalize_value(src[p], m, denom, gamma[c], beta[c]);
            }
        }
    }
    Ok(out)
}

/// Residual self-attention restricted to the active tokens.
///
/// Queries, keys and values all come from the gathered set; inactive
/// positions copy the cached output. Under a full mask this is exactly the
/// dense block. Under a partial mask the result differs from dense attention
/// because inactive keys are left out.
pub fn sparse_self_attention(
    input: &Tensor4,
    weights: &AttentionWeights,
    ctx: &SparseLayerContext,
    mask: &BinaryMask,
) -> Result<Tensor4> {
    ctx.require_gate("sparse_self_attention")?;
    let s = input.shape();
    check_mask("sparse_self_attention", s, mask)?;
    weights.check_channels(s.c)?;
    let mut out = ctx.base_output(s, mask)?;
    if mask.is_empty() {
        return Ok(out);
    }
    let pixels = mask.active_indices();
    for n in 0..s.n {
        let x = input.gather_tokens(n, &pixels);
        let kv = weights.context(&x)?;
        let y = weights.residual(&x, &kv)?;
        out.scatter_tokens(n, &pixels, &y);
    }
    Ok(out)
}

/// Residual cross-attention of the active image tokens against the full text
/// sequence. Active rows equal the dense block's rows exactly.
pub fn sparse_cross_attention(
    input: &Tensor4,
    weights: &AttentionWeights,
    text: &Matrix,
    ctx: &SparseLayerContext,
    mask: &BinaryMask,
) -> Result<Tensor4> {
    ctx.require_gate("sparse_cross_attention")?;
    let s = input.shape();
    check_mask("sparse_cross_attention", s, mask)?;
    weights.check_channels(s.c)?;
    let mut out = ctx.base_output(s, mask)?;
    if mask.is_empty() {
        return Ok(out);
    }
    let kv = weights.context(text)?;
    let pixels = mask.active_indices();
    for n in 0..s.n {
        let x = input.gather_tokens(n, &pixels);
        let y = weights.residual(&x, &kv)?;
        out.scatter_tokens(n, &pixels, &y);
    }
    Ok(out)
}

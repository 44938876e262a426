use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Stride-1 convolution weights with odd kernels and same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    weight: Tensor4,
    bias: Vec<f32>,
}

impl ConvWeights {
    /// `weight` has shape `(c_out, c_in, h_k, w_k)`; both kernel dims must be odd.
    pub fn new(weight: Tensor4, bias: Vec<f32>) -> Result<Self> {
        let s = weight.shape();
        if s.h % 2 == 0 || s.w % 2 == 0 {
            return Err(Error::contract(format!(
                "convolution kernel must be odd-sized, got {}x{}",
                s.h, s.w
            )));
        }
        if bias.len() != s.n {
            return Err(Error::contract(format!(
                "bias length {} does not match c_out {}",
                bias.len(),
                s.n
            )));
        }
        Ok(ConvWeights { weight, bias })
    }

    pub fn weight(&self) -> &Tensor4 {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    /// Same-padding halo per side, `(rows, cols)`.
    pub fn padding(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        ((kh - 1) / 2, (kw - 1) / 2)
    }
}

/// Dense same-padded cross-correlation with bias.
///
/// Each output pixel accumulates from zero in kernel-row → kernel-col →
/// input-channel order and adds the bias last. The sparse path evaluates
/// exactly the same sequence on gathered blocks.
pub fn conv2d(input: &Tensor4, weights: &ConvWeights) -> Result<Tensor4> {
    let s = input.shape();
    if s.c != weights.c_in() {
        return Err(Error::shape("conv2d", s, weights.weight().shape()));
    }
    let (ph, pw) = weights.padding();
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let mut padded = vec![0.0f32; s.c * hp * wp];
    let mut out = Tensor4::zeros(Shape4::new(s.n, weights.c_out(), s.h, s.w));
    let out_sample = weights.c_out() * s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..s.h {
                let dst = &mut padded[(c * hp + y + ph) * wp + pw..][..s.w];
                dst.copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
        let dst = &mut out.data_mut()[n * out_sample..(n + 1) * out_sample];
        conv_valid_block(&padded, s.c, hp, wp, weights, dst);
    }
    Ok(out)
}

/// Valid (unpadded) convolution of one `c_in × ih × iw` block into a
/// `c_out × (ih-kh+1) × (iw-kw+1)` output slice.
pub(crate) fn conv_valid_block(
    input: &[f32],
    c_in: usize,
    ih: usize,
    iw: usize,
    weights: &ConvWeights,
    out: &mut [f32],
) {
    let (kh, kw) = weights.kernel();
    let (oh, ow) = (ih + 1 - kh, iw + 1 - kw);
    debug_assert_eq!(input.len(), c_in * ih * iw);
    debug_assert_eq!(out.len(), weights.c_out() * oh * ow);
    let w = weights.weight().data();
    for co in 0..weights.c_out() {
        let acc = &mut out[co * oh * ow..(co + 1) * oh * ow];
        acc.fill(0.0);
        for ky in 0..kh {
            for kx in 0..kw {
                for ci in 0..c_in {
                    let wv = w[((co * c_in + ci) * kh + ky) * kw + kx];
                    let plane = &input[ci * ih * iw..(ci + 1) * ih * iw];
                    for oy in 0..oh {
                        let src = &plane[(oy + ky) * iw + kx..][..ow];
                        let dst = &mut acc[oy * ow..(oy + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let b = weights.bias()[co];
        for v in acc.iter_mut() {
            *v += b;
        }
    }
}

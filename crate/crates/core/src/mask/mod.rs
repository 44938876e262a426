//! Difference-mask generation: accumulated latent differences, OTSU
//! thresholding, dilation and the OR-pooled resolution pyramid.

mod binary;
mod diff;
mod otsu;
pub mod pgm;

pub use binary::{build_pyramid, dilate, BinaryMask, MaskPyramid};
pub use diff::{accumulate_diff, DiffMap, MaskWindow};
pub use otsu::{otsu_candidates, otsu_objective, otsu_threshold, MaskStatus, OtsuResult, OTSU_CANDIDATES};

use crate::error::Result;
use crate::tensor::Tensor4;

/// Full detection chain: accumulate, threshold, dilate.
pub fn difference_mask(
    x_steps: &[Tensor4],
    y_steps: &[Tensor4],
    window: MaskWindow,
    dilation_radius: usize,
) -> Result<OtsuResult> {
    let diff = accumulate_diff(x_steps, y_steps, window)?;
    let mut res = otsu_threshold(&diff);
    if res.status == MaskStatus::Edit {
        res.mask = dilate(&res.mask, dilation_radius);
    }
    Ok(res)
}

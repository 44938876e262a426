use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Shape4, Tensor4};

/// Block edge lengths searched by [`apsc_select`].
pub const DEFAULT_BLOCK_CANDIDATES: [usize; 5] = [2, 4, 8, 16, 32];

/// Tiling of an output plane into gathered blocks.
///
/// Output tiles of size `tile` sit on a regular grid anchored at `(0, 0)`;
/// each is computed from an input block of size `block = tile + kernel - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherPlan {
    pub plane: (usize, usize),
    pub block: (usize, usize),
    pub tile: (usize, usize),
    pub kernel: (usize, usize),
    /// Top-left output coordinates of the active tiles, row-major.
    pub origins: Vec<(usize, usize)>,
    /// `tile_h · tile_w · origins.len()`.
    pub cost: u64,
}

impl GatherPlan {
    pub fn tile_area(&self) -> usize {
        self.tile.0 * self.tile.1
    }

    /// Output positions computed per sample, including tile overhang.
    pub fn active_output_pixels(&self) -> u64 {
        (self.tile_area() * self.origins.len()) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn halo(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.plane.0.div_ceil(self.tile.0), self.plane.1.div_ceil(self.tile.1))
    }

    /// Stacked shape of the gathered blocks for an input of `n × c`.
    pub fn gathered_shape(&self, n: usize, c: usize) -> Shape4 {
        Shape4::new(self.origins.len() * n, c, self.block.0, self.block.1)
    }
}

fn active_tiles(mask: &BinaryMask, tile: (usize, usize)) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let cols = w.div_ceil(tile.1);
    let rows = h.div_ceil(tile.0);
    let mut hit = vec![false; rows * cols];
    for i in mask.active_indices() {
        let (y, x) = (i / w, i % w);
        hit[(y / tile.0) * cols + x / tile.1] = true;
    }
    hit.iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(((i / cols) * tile.0, (i % cols) * tile.1)))
        .collect()
}

/// Chooses the block size minimizing `tile_area · active_tiles` over the
/// candidate edge lengths (each axis independently). Ties prefer the block
/// with the smaller area, then the smaller height.
pub fn apsc_select(mask: &BinaryMask, kernel: (usize, usize), candidates: &[usize]) -> Result<GatherPlan> {
    let (kh, kw) = kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("kernel {kh}x{kw} must be odd")));
    }
    let mut best: Option<GatherPlan> = None;
    for &bh in candidates {
        for &bw in candidates {
            if bh < kh || bw < kw {
                continue;
            }
            let tile = (bh - kh + 1, bw - kw + 1);
            let origins = active_tiles(mask, tile);
            let cost = (tile.0 * tile.1 * origins.len()) as u64;
            let better = match &best {
                None => true,
                Some(b) => {
                    let key = (cost, bh * bw, bh);
                    key < (b.cost, b.block.0 * b.block.1, b.block.0)
                }
            };
            if better {
                best = Some(GatherPlan {
                    plane: mask.dims(),
                    block: (bh, bw),
                    tile,
                    kernel,
                    origins,
                    cost,
                });
            }
        }
    }
    best.ok_or_else(|| {
        Error::Config(format!(
            "no block candidate in {candidates:?} fits a {kh}x{kw} kernel"
        ))
    })
}

/// Copies, for every plan origin and sample, the input block covering the
/// tile plus its kernel halo. Reads outside the plane are zero, which is the
/// dense same-padding convention.
pub fn gather(input: &Tensor4, plan: &GatherPlan) -> Result<Tensor4> {
    let mut out = Tensor4::zeros(plan.gathered_shape(input.shape().n, input.shape().c));
    gather_into(input, plan, &mut out)?;
    Ok(out)
}

pub fn gather_into(input: &Tensor4, plan: &GatherPlan, out: &mut Tensor4) -> Result<()> {
    let s = input.shape();
    if (s.h, s.w) != plan.plane {
        return Err(Error::shape("gather", s, plan.plane));
    }
    out.check_shape("gather output", plan.gathered_shape(s.n, s.c))?;
    let (bh, bw) = plan.block;
    let (ph, pw) = plan.halo();
    let block_len = s.c * bh * bw;
    let data = out.data_mut();
    for (oi, &(oy, ox)) in plan.origins.iter().enumerate() {
        for n in 0..s.n {
            let b = oi * s.n + n;
            let dst_block = &mut data[b * block_len..(b + 1) * block_len];
            dst_block.fill(0.0);
            // input columns [x0, x1) land at block column x0 + pw - ox
            let x0 = ox.saturating_sub(pw);
            let x1 = (ox + bw - pw).min(s.w);
            if x0 >= x1 {
                continue;
            }
            for c in 0..s.c {
                let plane = input.plane(n, c);
                for by in 0..bh {
                    let iy = (oy + by) as isize - ph as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let bx0 = x0 + pw - ox;
                    let dst = &mut dst_block[(c * bh + by) * bw + bx0..][..x1 - x0];
                    dst.copy_from_slice(&plane[iy * s.w + x0..iy * s.w + x1]);
                }
            }
        }
    }
    Ok(())
}

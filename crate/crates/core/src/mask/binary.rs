use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Per-pixel edit indicator.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    active: usize,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} active)", self.h, self.w, self.active)
    }
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
            active: 0,
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![true; h * w],
            active: h * w,
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::contract(format!(
                "mask has {} bits, expected {h}x{w}",
                bits.len()
            )));
        }
        let active = bits.iter().filter(|&&b| b).count();
        Ok(BinaryMask { h, w, bits, active })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        let active = bits.iter().filter(|&&b| b).count();
        BinaryMask { h, w, bits, active }
    }

    /// Axis-aligned rectangle `[y0, y0+rh) × [x0, x0+rw)`, clipped to the plane.
    pub fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Self {
        BinaryMask::from_fn(h, w, |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        let b = &mut self.bits[y * self.w + x];
        if *b != on {
            *b = on;
            if on {
                self.active += 1;
            } else {
                self.active -= 1;
            }
        }
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.active as f64 / self.bits.len() as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.active == 0
    }

    pub fn is_full(&self) -> bool {
        self.active == self.bits.len()
    }

    /// Flat row-major indices of active pixels, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
            active: self.bits.len() - self.active,
        }
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask::from_fn(self.h, self.w, |y, x| self.get(y, x) && other.get(y, x))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Logical OR over 2×2 footprints.
    pub fn or_pool2(&self) -> Result<BinaryMask> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::contract(format!(
                "cannot OR-pool a {}x{} mask",
                self.h, self.w
            )));
        }
        Ok(BinaryMask::from_fn(self.h / 2, self.w / 2, |y, x| {
            self.get(2 * y, 2 * x)
                || self.get(2 * y, 2 * x + 1)
                || self.get(2 * y + 1, 2 * x)
                || self.get(2 * y + 1, 2 * x + 1)
        }))
    }

    /// OR-pools repeatedly until the mask is `h × w`.
    pub fn pooled_to(&self, h: usize, w: usize) -> Result<BinaryMask> {
        let mut m = self.clone();
        while m.h > h || m.w > w {
            m = m.or_pool2()?;
        }
        if m.dims() != (h, w) {
            return Err(Error::contract(format!(
                "{}x{} mask does not pool to {h}x{w}",
                self.h, self.w
            )));
        }
        Ok(m)
    }

    /// Fixture form: `1×1×h×w` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor4 {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor4::new(Shape4::new(1, 1, self.h, self.w), data).expect("shape matches")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values above 0.5 are active.
    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::contract(format!("mask tensor must be 1x1xHxW, got {s}")));
        }
        BinaryMask::from_bits(s.h, s.w, t.data().iter().map(|&v| v > 0.5).collect())
    }
}

/// Square-element dilation; radius 0 is the identity.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    // separable: horizontal then vertical max filter
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| mask.get(y, xx));
        }
    }
    BinaryMask::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        (lo..=hi).any(|yy| rows[yy * w + x])
    })
}

/// OR-pooled multi-resolution masks; level 0 is the latent resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPyramid {
    levels: Vec<BinaryMask>,
}

impl MaskPyramid {
    pub fn levels(&self) -> &[BinaryMask] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &BinaryMask {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_pyramid(mask: &BinaryMask, levels: usize) -> Result<MaskPyramid> {
    if levels == 0 {
        return Err(Error::contract("mask pyramid needs at least one level"));
    }
    let f = 1usize << (levels - 1);
    if mask.h % f != 0 || mask.w % f != 0 {
        return Err(Error::contract(format!(
            "{}x{} mask is not divisible by 2^{}",
            mask.h,
            mask.w,
            levels - 1
        )));
    }
    let mut out = vec![mask.clone()];
    for _ in 1..levels {
        let next = out.last().unwrap().or_pool2()?;
        out.push(next);
    }
    Ok(MaskPyramid { levels: out })
}

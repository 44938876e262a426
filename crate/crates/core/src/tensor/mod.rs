//! Dense reference kernels.
//!
//! Everything here is the baseline path of the engine and doubles as the
//! correctness reference for the sparse kernels in [`crate::sparse`]. All
//! kernels use a fixed accumulation order, so the sparse path can reproduce
//! dense results bit-for-bit wherever it evaluates the same expression.

mod attention;
mod conv;
pub mod io;
mod macs;
mod norm;

pub use attention::{
    attention, attention_probs_row, cross_attention_block, self_attention_block, softmax_rows,
    weighted_sum_row, AttentionWeights, KeyValues,
};
pub use conv::{conv2d, ConvWeights};
pub(crate) use conv::conv_valid_block;
pub use macs::{macs_attention, macs_conv, macs_linear, LayerMacs, MacsReport};
pub use norm::{group_norm, GroupNormOutput, GroupStats};
pub(crate) use norm::{check_affine, norm_denom, normalize_value};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a rank-4 NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW feature map of `f32`, row-major in n → c → h → w order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: f32) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one sample as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[f32] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Equality on the bit patterns, so `-0.0 != 0.0` and NaN payloads matter.
    pub fn bit_eq(&self, other: &Tensor4) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_shape(&self, op: &'static str, expected: Shape4) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, self.shape, expected));
        }
        Ok(())
    }

    /// Token matrix (h·w × c) of one sample; row `y*w + x` holds the pixel's channels.
    pub fn to_tokens(&self, n: usize) -> Matrix {
        let Shape4 { c, .. } = self.shape;
        let p = self.shape.plane();
        let mut data = vec![0.0; p * c];
        for ch in 0..c {
            for (i, v) in self.plane(n, ch).iter().enumerate() {
                data[i * c + ch] = *v;
            }
        }
        Matrix { rows: p, cols: c, data }
    }

    /// Token rows for a subset of pixel indices, in the order given.
    pub fn gather_tokens(&self, n: usize, pixels: &[usize]) -> Matrix {
        let c = self.shape.c;
        let mut data = vec![0.0; pixels.len() * c];
        for ch in 0..c {
            let plane = self.plane(n, ch);
            for (r, &p) in pixels.iter().enumerate() {
                data[r * c + ch] = plane[p];
            }
        }
        Matrix {
            rows: pixels.len(),
            cols: c,
            data,
        }
    }

    /// Writes token rows back to the given pixel indices of sample `n`.
    pub fn scatter_tokens(&mut self, n: usize, pixels: &[usize], tokens: &Matrix) {
        assert_eq!(tokens.rows, pixels.len());
        assert_eq!(tokens.cols, self.shape.c);
        let c = self.shape.c;
        for ch in 0..c {
            let plane = self.plane_mut(n, ch);
            for (r, &p) in pixels.iter().enumerate() {
                plane[p] = tokens.data[r * c + ch];
            }
        }
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&self) -> Result<Tensor4> {
        let s = self.shape;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::contract(format!("avg_pool2 needs even spatial dims, got {s}")));
        }
        let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
        Ok(Tensor4::from_fn(out_shape, |n, c, y, x| {
            let a = self.at(n, c, 2 * y, 2 * x);
            let b = self.at(n, c, 2 * y, 2 * x + 1);
            let d = self.at(n, c, 2 * y + 1, 2 * x);
            let e = self.at(n, c, 2 * y + 1, 2 * x + 1);
            ((a + b) + (d + e)) * 0.25
        }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Tensor4 {
        let s = self.shape;
        Tensor4::from_fn(Shape4::new(s.n, s.c, s.h * 2, s.w * 2), |n, c, y, x| {
            self.at(n, c, y / 2, x / 2)
        })
    }

    /// Channel concatenation `[self, other]`.
    pub fn concat_channels(&self, other: &Tensor4) -> Result<Tensor4> {
        let (a, b) = (self.shape, other.shape);
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape("concat_channels", a, b));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..a.n {
            data.extend_from_slice(self.sample(n));
            data.extend_from_slice(other.sample(n));
        }
        Ok(Tensor4 {
            shape: Shape4::new(a.n, a.c + b.c, a.h, a.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major `rows × cols` matrix; used for token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Dense affine map applied per row: `y = W·x + b`, with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(Error::contract(format!(
                "linear bias length {} does not match {} outputs",
                bias.len(),
                weight.rows
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.data[i * dim + i] = 1.0;
        }
        Linear {
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.in_dim() {
            return Err(Error::shape(
                "linear",
                (x.rows, x.cols),
                (self.out_dim(), self.in_dim()),
            ));
        }
        let mut out = Matrix::zeros(x.rows, self.out_dim());
        for r in 0..x.rows {
            let xr = x.row(r);
            let orow = out.row_mut(r);
            for (o, dst) in orow.iter_mut().enumerate() {
                let w = self.weight.row(o);
                let mut acc = 0.0f32;
                for (a, b) in w.iter().zip(xr) {
                    acc += a * b;
                }
                *dst = acc + self.bias[o];
            }
        }
        Ok(out)
    }
}

/// Sigmoid-weighted linear unit.
#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

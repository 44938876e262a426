use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Largest step index the difference window may reach.
pub const MAX_WINDOW_STEP: usize = 10;

/// Inclusive, 1-based step window `[t1, t2]` over which differences accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskWindow {
    pub t1: usize,
    pub t2: usize,
}

impl Default for MaskWindow {
    fn default() -> Self {
        MaskWindow { t1: 5, t2: 10 }
    }
}

impl MaskWindow {
    pub fn new(t1: usize, t2: usize) -> Result<Self> {
        let w = MaskWindow { t1, t2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t1 > self.t2 || self.t2 > MAX_WINDOW_STEP {
            return Err(Error::contract(format!(
                "mask window [{}, {}] must satisfy 1 <= t1 <= t2 <= {MAX_WINDOW_STEP}",
                self.t1, self.t2
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<usize> {
        self.t1..=self.t2
    }
}

/// Min-max normalized accumulated difference, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    h: usize,
    w: usize,
    values: Vec<f32>,
    degenerate: bool,
}

impl DiffMap {
    /// Builds a map from already-normalized values (used by tests and tools).
    pub fn from_values(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::contract(format!(
                "diff map has {} values, expected {h}x{w}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("diff map values must lie in [0, 1]"));
        }
        let degenerate = values.iter().all(|&v| v == 0.0);
        Ok(DiffMap {
            h,
            w,
            values,
            degenerate,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The raw accumulated map was constant; all values are zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// `Normalize(Σ_{t=t1..t2} mean_c |X_t − Y_t|)` per pixel.
///
/// `x_steps[i]` and `y_steps[i]` hold the latents after step `i + 1`. Channel
/// (and batch) reduction is a mean so the scale does not depend on width.
pub fn accumulate_diff(x_steps: &[Tensor4], y_steps: &[Tensor4], window: MaskWindow) -> Result<DiffMap> {
    window.validate()?;
    if x_steps.len() < window.t2 || y_steps.len() < window.t2 {
        return Err(Error::contract(format!(
            "latent sequences of length {}/{} do not cover step {}",
            x_steps.len(),
            y_steps.len(),
            window.t2
        )));
    }
    let shape = x_steps[window.t1 - 1].shape();
    let planes = (shape.n * shape.c) as f64;
    let mut acc = vec![0.0f64; shape.plane()];
    for t in window.steps() {
        let (x, y) = (&x_steps[t - 1], &y_steps[t - 1]);
        if x.shape() != shape || y.shape() != shape {
            return Err(Error::shape("accumulate_diff", x.shape(), y.shape()));
        }
        let mut step = vec![0.0f64; shape.plane()];
        for n in 0..shape.n {
            for c in 0..shape.c {
                for ((s, a), b) in step.iter_mut().zip(x.plane(n, c)).zip(y.plane(n, c)) {
                    *s += (*a as f64 - *b as f64).abs();
                }
            }
        }
        for (a, s) in acc.iter_mut().zip(step) {
            *a += s / planes;
        }
    }
    let (min, max) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (h, w) = (shape.h, shape.w);
    if max == min {
        return Ok(DiffMap {
            h,
            w,
            values: vec![0.0; h * w],
            degenerate: true,
        });
    }
    let range = max - min;
    let values = acc
        .iter()
        .map(|&v| (((v - min) / range) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(DiffMap {
        h,
        w,
        values,
        degenerate: false,
    })
}

use super::{Linear, Matrix, Tensor4};
use crate::error::{Error, Result};

/// Keys stored transposed (`dim × n_keys`) next to row-major values.
///
/// The transposed layout lets the score loop run contiguously over keys.
#[derive(Clone, Debug)]
pub struct KeyValues {
    kt: Matrix,
    v: Matrix,
}

impl KeyValues {
    pub fn new(k: &Matrix, v: Matrix) -> Result<Self> {
        if k.rows != v.rows {
            return Err(Error::shape("attention keys/values", (k.rows, k.cols), (v.rows, v.cols)));
        }
        Ok(KeyValues { kt: k.transpose(), v })
    }

    pub fn len(&self) -> usize {
        self.v.rows
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows == 0
    }

    pub fn key_dim(&self) -> usize {
        self.kt.rows
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols
    }

    pub fn values(&self) -> &Matrix {
        &self.v
    }
}

/// Softmax of `scale · q·kᵀ` for a single query row, written into `probs`.
pub fn attention_probs_row(q: &[f32], kv: &KeyValues, scale: f32, probs: &mut [f32]) {
    let nk = kv.len();
    debug_assert_eq!(probs.len(), nk);
    debug_assert_eq!(q.len(), kv.key_dim());
    probs.fill(0.0);
    for (d, &qd) in q.iter().enumerate() {
        let krow = &kv.kt.data[d * nk..(d + 1) * nk];
        for (s, &k) in probs.iter_mut().zip(krow) {
            *s += qd * k;
        }
    }
    let mut max = f32::NEG_INFINITY;
    for s in probs.iter_mut() {
        *s *= scale;
        max = max.max(*s);
    }
    let mut sum = 0.0f64;
    for s in probs.iter_mut() {
        *s = (*s - max).exp();
        sum += *s as f64;
    }
    let inv = (1.0 / sum) as f32;
    for s in probs.iter_mut() {
        *s *= inv;
    }
}

/// `out = Σ_j probs[j] · v[j]`, accumulated in key order.
pub fn weighted_sum_row(probs: &[f32], v: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(probs.len(), v.rows);
    out.fill(0.0);
    for (j, &p) in probs.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += p * x;
        }
    }
}

/// Row-wise softmax probabilities for every query (materialized map).
pub fn softmax_rows(q: &Matrix, kv: &KeyValues, scale: f32) -> Result<Matrix> {
    check_dims(q, kv)?;
    let mut probs = Matrix::zeros(q.rows, kv.len());
    for r in 0..q.rows {
        attention_probs_row(q.row(r), kv, scale, probs.row_mut(r));
    }
    Ok(probs)
}

fn check_dims(q: &Matrix, kv: &KeyValues) -> Result<()> {
    if q.cols != kv.key_dim() {
        return Err(Error::shape("attention query/key dim", (q.rows, q.cols), (kv.len(), kv.key_dim())));
    }
    if kv.is_empty() {
        return Err(Error::contract("attention over an empty key set"));
    }
    Ok(())
}

/// `softmax(q·kᵀ·scale)·v` with a max-subtracted softmax.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f32) -> Result<Matrix> {
    let kv = KeyValues::new(k, v.clone())?;
    attend(q, &kv, scale)
}

pub(crate) fn attend(q: &Matrix, kv: &KeyValues, scale: f32) -> Result<Matrix> {
    check_dims(q, kv)?;
    let mut out = Matrix::zeros(q.rows, kv.value_dim());
    let mut probs = vec![0.0; kv.len()];
    for r in 0..q.rows {
        attention_probs_row(q.row(r), kv, scale, &mut probs);
        weighted_sum_row(&probs, &kv.v, out.row_mut(r));
    }
    Ok(out)
}

/// Projections of one attention layer. For self-attention all four are
/// `c → c`; for cross-attention `to_k`/`to_v` map the text dimension to `c`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
}

impl AttentionWeights {
    pub fn dim(&self) -> usize {
        self.to_q.out_dim()
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.dim() as f32).sqrt()
    }

    pub(crate) fn check_channels(&self, c: usize) -> Result<()> {
        if self.to_q.in_dim() != c || self.to_out.out_dim() != c {
            return Err(Error::contract(format!(
                "attention projections expect {} channels, input has {c}",
                self.to_q.in_dim()
            )));
        }
        Ok(())
    }

    /// Projected keys and values of a context sequence.
    pub fn context(&self, tokens: &Matrix) -> Result<KeyValues> {
        KeyValues::new(&self.to_k.forward(tokens)?, self.to_v.forward(tokens)?)
    }

    /// Residual attention update of a token batch: `x + to_out(attend(to_q x))`.
    pub(crate) fn residual(&self, x: &Matrix, kv: &KeyValues) -> Result<Matrix> {
        let q = self.to_q.forward(x)?;
        let a = attend(&q, kv, self.scale())?;
        let mut y = self.to_out.forward(&a)?;
        for (o, &xi) in y.data.iter_mut().zip(&x.data) {
            *o += xi;
        }
        Ok(y)
    }
}

/// Dense residual self-attention over all `h·w` tokens of every sample.
pub fn self_attention_block(input: &Tensor4, weights: &AttentionWeights) -> Result<Tensor4> {
    weights.check_channels(input.shape().c)?;
    let mut out = Tensor4::zeros(input.shape());
    let pixels: Vec<usize> = (0..input.shape().plane()).collect();
    for n in 0..input.shape().n {
        let x = input.to_tokens(n);
        let kv = weights.context(&x)?;
        let y = weights.residual(&x, &kv)?;
        out.scatter_tokens(n, &pixels, &y);
    }
    Ok(out)
}

/// Dense residual cross-attention of image tokens against a text sequence.
///
/// When `map_hook` is given it receives the `h·w × n_text` attention map of
/// each sample before it is applied to the values and may rewrite it.
pub fn cross_attention_block(
    input: &Tensor4,
    weights: &AttentionWeights,
    text: &Matrix,
    mut map_hook: Option<&mut dyn FnMut(usize, &mut Matrix) -> Result<()>>,
) -> Result<Tensor4> {
    weights.check_channels(input.shape().c)?;
    let kv = weights.context(text)?;
    let mut out = Tensor4::zeros(input.shape());
    let pixels: Vec<usize> = (0..input.shape().plane()).collect();
    for n in 0..input.shape().n {
        let x = input.to_tokens(n);
        let q = weights.to_q.forward(&x)?;
        let mut probs = softmax_rows(&q, &kv, weights.scale())?;
        if let Some(hook) = map_hook.as_mut() {
            hook(n, &mut probs)?;
        }
        let mut a = Matrix::zeros(x.rows, kv.value_dim());
        for r in 0..x.rows {
            weighted_sum_row(probs.row(r), kv.values(), a.row_mut(r));
        }
        let mut y = weights.to_out.forward(&a)?;
        for (o, &xi) in y.data.iter_mut().zip(&x.data) {
            *o += xi;
        }
        out.scatter_tokens(n, &pixels, &y);
    }
    Ok(out)
}

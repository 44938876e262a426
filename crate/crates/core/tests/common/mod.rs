//! Naive reference loops and random fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_edit_core::mask::BinaryMask;
use sparse_edit_core::tensor::{AttentionWeights, ConvWeights, Linear, Matrix, Shape4, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut impl Rng, shape: Shape4, scale: f32) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| r.random_range(-scale..scale))
}

pub fn rand_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rand_linear(r: &mut impl Rng, inp: usize, out: usize) -> Linear {
    let s = 1.0 / (inp as f32).sqrt();
    Linear::new(rand_matrix(r, out, inp, s), (0..out).map(|_| r.random_range(-0.1..0.1)).collect()).unwrap()
}

pub fn rand_conv(r: &mut impl Rng, c_in: usize, c_out: usize, k: usize) -> ConvWeights {
    let s = 1.0 / ((c_in * k * k) as f32).sqrt();
    let w = rand_tensor(r, Shape4::new(c_out, c_in, k, k), s);
    ConvWeights::new(w, (0..c_out).map(|_| r.random_range(-0.1..0.1)).collect()).unwrap()
}

/// `c → c` projections, with keys and values read from `ctx_dim` channels.
pub fn rand_attention(r: &mut impl Rng, c: usize, ctx_dim: usize) -> AttentionWeights {
    AttentionWeights {
        to_q: rand_linear(r, c, c),
        to_k: rand_linear(r, ctx_dim, c),
        to_v: rand_linear(r, ctx_dim, c),
        to_out: rand_linear(r, c, c),
    }
}

/// Mask with each pixel active with probability `p`.
pub fn rand_mask(r: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.random_bool(p))
}

/// Mask with exactly `round(frac · h·w)` active pixels at random positions.
pub fn mask_with_fraction(r: &mut impl Rng, h: usize, w: usize, frac: f64) -> BinaryMask {
    let target = (frac * (h * w) as f64).round() as usize;
    let mut m = BinaryMask::empty(h, w);
    let mut count = 0;
    while count < target {
        let (y, x) = (r.random_range(0..h), r.random_range(0..w));
        if !m.get(y, x) {
            m.set(y, x, true);
            count += 1;
        }
    }
    m
}

pub fn linear_f64(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim())
        .map(|o| {
            let w = l.weight.row(o);
            w.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum::<f64>() + l.bias[o] as f64
        })
        .collect()
}

pub fn naive_conv(input: &Tensor4, wts: &ConvWeights) -> Vec<f64> {
    let s = input.shape();
    let (kh, kw) = wts.kernel();
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let w = wts.weight();
    let mut out = Vec::with_capacity(s.n * wts.c_out() * s.plane());
    for n in 0..s.n {
        for co in 0..wts.c_out() {
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut acc = wts.bias()[co] as f64;
                    for ci in 0..s.c {
                        for dy in 0..kh as isize {
                            for dx in 0..kw as isize {
                                let (iy, ix) = (y + dy - ph, x + dx - pw);
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, dy as usize, dx as usize) as f64
                                    * input.at(n, ci, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn naive_group_norm(input: &Tensor4, groups: usize, gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f64> {
    let s = input.shape();
    let cpg = s.c / groups;
    let mut out = vec![0.0; s.len()];
    for n in 0..s.n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..s.h {
                    for x in 0..s.w {
                        vals.push(input.at(n, c, y, x) as f64);
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let v = (input.at(n, c, y, x) as f64 - mean) / (var + eps as f64).sqrt();
                        out[s.index(n, c, y, x)] = gamma[c] as f64 * v + beta[c] as f64;
                    }
                }
            }
        }
    }
    out
}

/// `softmax(q kᵀ scale) v` row by row in f64.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qr| {
            let logits: Vec<f64> = k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (p, vr) in e.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vr) {
                    *o += p / z * x;
                }
            }
            out
        })
        .collect()
}

/// Tokens of sample `n` as f64 rows, pixel-major.
pub fn tokens_f64(t: &Tensor4, n: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s.plane())
        .map(|p| (0..s.c).map(|c| t.plane(n, c)[p] as f64).collect())
        .collect()
}

pub fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect()
}

/// Residual attention `x + to_out(attn(to_q x, to_k ctx, to_v ctx))` in f64.
pub fn naive_residual_attention(w: &AttentionWeights, x: &[Vec<f64>], ctx: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q: Vec<_> = x.iter().map(|r| linear_f64(&w.to_q, r)).collect();
    let k: Vec<_> = ctx.iter().map(|r| linear_f64(&w.to_k, r)).collect();
    let v: Vec<_> = ctx.iter().map(|r| linear_f64(&w.to_v, r)).collect();
    let a = naive_attention(&q, &k, &v, 1.0 / (w.dim() as f64).sqrt());
    a.iter()
        .zip(x)
        .map(|(ar, xr)| linear_f64(&w.to_out, ar).iter().zip(xr).map(|(o, xi)| o + xi).collect())
        .collect()
}

pub fn max_diff_f64(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Largest |a − b| over pixels inside `mask` and whether every outside pixel is bit-equal.
pub fn split_compare(a: &Tensor4, b_inside: &Tensor4, b_outside: &Tensor4, mask: &BinaryMask) -> (f32, bool) {
    let s = a.shape();
    let mut inside = 0.0f32;
    let mut outside_eq = true;
    for n in 0..s.n {
        for c in 0..s.c {
            for p in 0..s.plane() {
                let (v, i, o) = (a.plane(n, c)[p], b_inside.plane(n, c)[p], b_outside.plane(n, c)[p]);
                if mask.get_index(p) {
                    inside = inside.max((v - i).abs());
                } else if v.to_bits() != o.to_bits() {
                    outside_eq = false;
                }
            }
        }
    }
    (inside, outside_eq)
}

/// Direct 256-candidate OTSU search: `(epsilon, objective, active pixels)`.
pub fn exhaustive_otsu(values: &[f32]) -> Option<(f32, f64, Vec<bool>)> {
    let mut best: Option<(f32, f64)> = None;
    for k in 0..256 {
        let eps = (k as f32 + 0.5) / 256.0;
        let a: Vec<f64> = values.iter().filter(|&&v| v < eps).map(|&v| v as f64).collect();
        let b: Vec<f64> = values.iter().filter(|&&v| v >= eps).map(|&v| v as f64).collect();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let d = a.iter().sum::<f64>() / na - b.iter().sum::<f64>() / nb;
        let obj = na * nb / ((na + nb) * (na + nb)) * d * d;
        if best.is_none_or(|(_, o)| obj > o) {
            best = Some((eps, obj));
        }
    }
    best.map(|(e, o)| (e, o, values.iter().map(|&v| v >= e).collect()))
}

/// Minimum of `tile area × active tiles` over all valid block pairs, by brute force.
pub fn exhaustive_apsc(mask: &BinaryMask, k: usize, cands: &[usize]) -> (u64, (usize, usize)) {
    let (h, w) = mask.dims();
    let mut best: Option<(u64, usize, usize, usize)> = None;
    for &bh in cands {
        for &bw in cands {
            if bh < k || bw < k {
                continue;
            }
            let (th, tw) = (bh - k + 1, bw - k + 1);
            let mut n = 0u64;
            let mut ty = 0;
            while ty < h {
                let mut tx = 0;
                while tx < w {
                    let hit = (ty..(ty + th).min(h)).any(|y| (tx..(tx + tw).min(w)).any(|x| mask.get(y, x)));
                    n += hit as u64;
                    tx += tw;
                }
                ty += th;
            }
            let f = (th * tw) as u64 * n;
            let key = (f, bh * bw, bh, bw);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let b = best.unwrap();
    (b.0, (b.2, b.3))
}

/// Reduced pipeline configuration for fast tests.
pub fn small_config() -> sparse_edit_core::unet::UNetConfig {
    sparse_edit_core::unet::UNetConfig {
        latent: [32, 32],
        channels: vec![8, 16],
        steps: 4,
        text_dim: 8,
        ..Default::default()
    }
}

use super::Tensor4;
use crate::error::{Error, Result};

/// Per-(sample, group) statistics, indexed `n * groups + g`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub groups: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct GroupNormOutput {
    pub output: Tensor4,
    pub stats: GroupStats,
}

/// `gamma * ((x - mean) / sqrt(var + eps)) + beta`.
///
/// Shared by the dense and cached-statistics paths so both produce identical
/// bits from identical statistics.
#[inline]
pub(crate) fn normalize_value(x: f32, mean: f32, denom: f32, gamma: f32, beta: f32) -> f32 {
    gamma * ((x - mean) / denom) + beta
}

#[inline]
pub(crate) fn norm_denom(var: f32, eps: f32) -> f32 {
    (var + eps).sqrt()
}

pub(crate) fn check_affine(c: usize, groups: usize, gamma: &[f32], beta: &[f32]) -> Result<()> {
    if groups == 0 || c % groups != 0 {
        return Err(Error::contract(format!(
            "channel count {c} is not divisible by {groups} groups"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::contract(format!(
            "gamma/beta lengths {}/{} do not match {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Group normalization over the spatial extent and the channels of each group.
///
/// Statistics are the population mean and variance, accumulated in `f64`
/// and rounded to `f32`; they are returned so callers can cache them.
pub fn group_norm(
    input: &Tensor4,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<GroupNormOutput> {
    let s = input.shape();
    check_affine(s.c, groups, gamma, beta)?;
    let cpg = s.c / groups;
    let mut output = Tensor4::zeros(s);
    let mut mean = Vec::with_capacity(s.n * groups);
    let mut var = Vec::with_capacity(s.n * groups);
    for n in 0..s.n {
        for g in 0..groups {
            let channels = g * cpg..(g + 1) * cpg;
            let count = (cpg * s.plane()) as f64;
            let sum: f64 = channels
                .clone()
                .flat_map(|c| input.plane(n, c).iter())
                .map(|&v| v as f64)
                .sum();
            let m = sum / count;
            let sq: f64 = channels
                .clone()
                .flat_map(|c| input.plane(n, c).iter())
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum();
            let (m, v) = (m as f32, (sq / count) as f32);
            mean.push(m);
            var.push(v);
            let denom = norm_denom(v, eps);
            for c in channels {
                let (ga, be) = (gamma[c], beta[c]);
                let src = input.plane(n, c);
                let dst = output.plane_mut(n, c);
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = normalize_value(x, m, denom, ga, be);
                }
            }
        }
    }
    Ok(GroupNormOutput {
        output,
        stats: GroupStats { groups, mean, var },
    })
}

use serde::{Deserialize, Serialize};

use super::{BinaryMask, DiffMap};

pub const OTSU_CANDIDATES: usize = 256;

/// Bin centres `(k + 0.5) / 256`, all strictly inside `(0, 1)`.
pub fn otsu_candidates() -> [f32; OTSU_CANDIDATES] {
    std::array::from_fn(|k| (k as f32 + 0.5) / OTSU_CANDIDATES as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStatus {
    Edit,
    /// Nothing changed: skip the sparse phase and reuse the cached result.
    NoEdit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult {
    pub epsilon: f32,
    pub objective: f64,
    pub mask: BinaryMask,
    pub status: MaskStatus,
}

/// Between-class variance `N1·N2/(N1+N2)² · (mean_A − mean_B)²`.
pub fn otsu_objective(n1: u64, sum1: f64, n2: u64, sum2: f64) -> f64 {
    let (a, b) = (n1 as f64, n2 as f64);
    let d = sum1 / a - sum2 / b;
    a * b / ((a + b) * (a + b)) * d * d
}

/// Picks the candidate threshold maximizing the between-class variance of
/// `A = {diff < ε}` and `B = {diff ≥ ε}`; ties go to the smaller `ε`.
pub fn otsu_threshold(diff: &DiffMap) -> OtsuResult {
    let (h, w) = diff.dims();
    let no_edit = || OtsuResult {
        epsilon: 1.0,
        objective: 0.0,
        mask: BinaryMask::empty(h, w),
        status: MaskStatus::NoEdit,
    };
    if diff.is_degenerate() {
        return no_edit();
    }
    let cands = otsu_candidates();
    // bin i holds pixels with exactly i candidates <= value
    let mut counts = [0u64; OTSU_CANDIDATES + 1];
    let mut sums = [0f64; OTSU_CANDIDATES + 1];
    for &v in diff.values() {
        let i = cands.partition_point(|&e| e <= v);
        counts[i] += 1;
        sums[i] += v as f64;
    }
    let total: u64 = counts.iter().sum();
    let total_sum: f64 = sums.iter().sum();

    let mut best: Option<(usize, f64)> = None;
    let (mut n1, mut s1) = (0u64, 0f64);
    for k in 0..OTSU_CANDIDATES {
        // candidate k moves bin k into A
        n1 += counts[k];
        s1 += sums[k];
        let n2 = total - n1;
        if n1 == 0 || n2 == 0 {
            continue;
        }
        let obj = otsu_objective(n1, s1, n2, total_sum - s1);
        if best.is_none_or(|(_, b)| obj > b) {
            best = Some((k, obj));
        }
    }
    let Some((k, objective)) = best else {
        return no_edit();
    };
    let epsilon = cands[k];
    let bits = diff.values().iter().map(|&v| v >= epsilon).collect();
    OtsuResult {
        epsilon,
        objective,
        mask: BinaryMask::from_bits(h, w, bits).expect("dims match"),
        status: MaskStatus::Edit,
    }
}

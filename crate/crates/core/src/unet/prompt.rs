use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Token ids standing in for an encoded text prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
}

fn mix(seed: u64, id: u32) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (u64::from(id).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Embedding of one token: a fixed pseudo-random vector in `[-1, 1)`.
pub fn token_embedding(id: u32, seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id));
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

impl PromptTokens {
    pub fn new(ids: Vec<u32>) -> Self {
        PromptTokens { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `len × dim` embedding matrix.
    pub fn embeddings(&self, seed: u64, dim: usize) -> Result<Matrix> {
        if self.ids.is_empty() {
            return Err(Error::Config("prompt has no tokens".into()));
        }
        let data = self.ids.iter().flat_map(|&id| token_embedding(id, seed, dim)).collect();
        Matrix::new(self.ids.len(), dim, data)
    }
}

/// Token positions `(old, new)` judged unchanged between two prompts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTokenMap {
    pub pairs: Vec<(usize, usize)>,
}

impl SharedTokenMap {
    /// Longest common subsequence of the id lists. Among equally long
    /// alignments the one matching earliest in `old` is chosen.
    pub fn lcs(old: &PromptTokens, new: &PromptTokens) -> Self {
        let (a, b) = (&old.ids, &new.ids);
        let (n, m) = (a.len(), b.len());
        // suffix table: len[i][j] = LCS of a[i..], b[j..]
        let mut len = vec![0u32; (n + 1) * (m + 1)];
        for i in (0..n).rev() {
            for j in (0..m).rev() {
                len[i * (m + 1) + j] = if a[i] == b[j] {
                    len[(i + 1) * (m + 1) + j + 1] + 1
                } else {
                    len[(i + 1) * (m + 1) + j].max(len[i * (m + 1) + j + 1])
                };
            }
        }
        let mut pairs = Vec::with_capacity(len[0] as usize);
        let (mut i, mut j) = (0, 0);
        while i < n && j < m {
            if a[i] == b[j] && len[i * (m + 1) + j] == len[(i + 1) * (m + 1) + j + 1] + 1 {
                pairs.push((i, j));
                i += 1;
                j += 1;
            } else if len[(i + 1) * (m + 1) + j] >= len[i * (m + 1) + j + 1] {
                i += 1;
            } else {
                j += 1;
            }
        }
        SharedTokenMap { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every new column comes from the cache: same length, all tokens shared.
    pub fn is_complete(&self, old_len: usize, new_len: usize) -> bool {
        old_len == new_len && self.pairs.len() == new_len
    }
}

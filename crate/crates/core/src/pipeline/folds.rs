use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;

/// Fold index per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: Vec<usize>,
}

/// Seeded permutation of `0..n` dealt round-robin into `k` folds.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::domain(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if n < k {
        return Err(Error::domain(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, &sample) in order.iter().enumerate() {
        assignments[sample] = pos % k;
    }
    Ok(FoldSplit { k, assignments })
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Held-out indices of `fold`, ascending.
    pub fn test(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Training indices of `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

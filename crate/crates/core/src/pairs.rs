//! Seeded permutations and dataset bookkeeping.

use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairsError {
    #[error("no derangement exists for {0} element(s)")]
    NoDerangement(usize),
    #[error("retention needs a non-empty original set")]
    EmptyBefore,
    #[error("after-count {after} exceeds before-count {before}")]
    AfterExceedsBefore { before: usize, after: usize },
    #[error("cannot draw {wanted} of {available} items")]
    NotEnough { wanted: usize, available: usize },
}

/// A permutation of `0..n` with no fixed points, found by rejection sampling
/// over seeded shuffles.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>, PairsError> {
    if n < 2 {
        return Err(PairsError::NoDerangement(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Fraction of the original records that survive filtering.
pub fn retention(before: usize, after: usize) -> Result<f64, PairsError> {
    if before == 0 {
        return Err(PairsError::EmptyBefore);
    }
    if after > before {
        return Err(PairsError::AfterExceedsBefore { before, after });
    }
    Ok(after as f64 / before as f64)
}

/// `k` distinct indices from `0..n`, seeded, returned in ascending order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, PairsError> {
    if k > n {
        return Err(PairsError::NotEnough {
            wanted: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

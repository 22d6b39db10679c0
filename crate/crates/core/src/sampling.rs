//! Epoch construction: shuffled partitions, uniform i.i.d. batches and the
//! rejection gate that resamples a partition until its batch gradients carry
//! enough energy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sq_norm;

/// The RNG used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPartition {
    pub n: usize,
    pub m: usize,
    pub batches: Vec<Vec<usize>>,
}

impl EpochPartition {
    pub fn batch_size(&self) -> usize {
        self.n / self.m
    }

    /// True when the batches are pairwise disjoint and cover `0..n`.
    pub fn is_disjoint_cover(&self) -> bool {
        let mut seen = vec![false; self.n];
        for b in &self.batches {
            for &i in b {
                if i >= self.n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_divisible(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 || !n.is_multiple_of(m) {
        return Err(Error::Divisibility { n, m });
    }
    Ok(())
}

/// Fisher–Yates permutation of `0..n` cut into `m` consecutive blocks.
pub fn shuffle_partition(n: usize, m: usize, rng: &mut impl Rng) -> Result<EpochPartition> {
    check_divisible(n, m)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let b = n / m;
    Ok(EpochPartition {
        n,
        m,
        batches: perm.chunks(b).map(<[usize]>::to_vec).collect(),
    })
}

/// `m` batches of size `n / m`, each index drawn uniformly with replacement.
pub fn uniform_batches(n: usize, m: usize, rng: &mut impl Rng) -> Result<EpochPartition> {
    check_divisible(n, m)?;
    let b = n / m;
    Ok(EpochPartition {
        n,
        m,
        batches: (0..m)
            .map(|_| (0..b).map(|_| rng.gen_range(0..n)).collect())
            .collect(),
    })
}

/// `sum_j ||grad_B_j||^2` for a partition.
pub fn sigma_p(
    partition: &EpochPartition,
    grad: &mut impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut total = 0.0;
    for b in &partition.batches {
        total += sq_norm(&grad(b)?);
    }
    Ok(total)
}

/// The gate threshold `c_sigma^2 m^2 / (divisor n)`.
pub fn gate_threshold(c_sigma: f64, m: usize, n: usize, divisor: f64) -> f64 {
    c_sigma * c_sigma * (m * m) as f64 / (divisor * n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub partition: EpochPartition,
    pub attempts: usize,
    pub sigma_p: f64,
}

/// Draws partitions from `source` until one reaches `threshold`.
///
/// Every attempt evaluates one gradient per batch; the caller charges
/// `m * attempts` evaluations.
pub fn rejection_gate(
    mut grad_at_start: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    mut source: impl FnMut() -> Result<EpochPartition>,
    threshold: f64,
    max_attempts: usize,
) -> Result<GateOutcome> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("gate threshold must be >= 0, got {threshold}")));
    }
    if max_attempts == 0 {
        return Err(Error::InvalidArgument("max_attempts must be >= 1".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for attempt in 1..=max_attempts {
        let partition = source()?;
        let s = sigma_p(&partition, &mut grad_at_start)?;
        if s >= threshold {
            return Ok(GateOutcome {
                partition,
                attempts: attempt,
                sigma_p: s,
            });
        }
        best = best.max(s);
    }
    Err(Error::GateExhausted {
        attempts: max_attempts,
        best,
        threshold,
    })
}

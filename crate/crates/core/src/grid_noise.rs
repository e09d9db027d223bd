//! Uniform time grids, the two scaled Bernoulli walks, and path sampling.
//!
//! `eps` drives the backward noise `B`, `beta` drives the forward noise `W`.
//! Both are stored 0-based: `eps[j]` is the sign of the increment
//! `B_{j+1} - B_j`.
//!
//! Sampling is keyed by `(seed, index)` through ChaCha stream selection, so a
//! Monte-Carlo batch gives the same paths whatever order the samples are
//! drawn in.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `n` accepted by [`enumerate_sign_sequences`].
pub const ENUMERATION_CAP: usize = 20;

/// Uniform partition of `[0, T]` into `n` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    delta: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "step count must be at least 1".into(),
            ));
        }
        Ok(Self {
            horizon,
            steps,
            delta: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sqrt_delta(&self) -> f64 {
        self.delta.sqrt()
    }

    /// Grid time `t_j`; the last point is `T` exactly.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.delta
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.time(j)).collect()
    }

    /// Step clock `[s/delta] * delta`.
    pub fn step_clock(&self, s: f64) -> f64 {
        let k = (s / self.delta).floor().clamp(0.0, self.steps as f64);
        self.time(k as usize)
    }

    /// Value of the forward walk at node `node` of level `level`:
    /// `(2 node - level) * sqrt(delta)`.
    pub fn node_value(&self, level: usize, node: usize) -> f64 {
        (2.0 * node as f64 - level as f64) * self.sqrt_delta()
    }
}

/// Shorthand for [`TimeGrid::new`].
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// One joint realization of the backward (`eps`) and forward (`beta`) signs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePath {
    pub eps: Vec<i8>,
    pub beta: Vec<i8>,
    pub seed: u64,
    pub index: u64,
}

impl NoisePath {
    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }
}

/// Path for substream 0 of `seed`.
pub fn sample_path(grid: &TimeGrid, seed: u64) -> NoisePath {
    sample_path_at(grid, seed, 0)
}

/// Path for substream `index` of `seed`.
pub fn sample_path_at(grid: &TimeGrid, seed: u64, index: u64) -> NoisePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = grid.steps();
    let mut draw = || if rng.random::<bool>() { 1 } else { -1 };
    let eps: Vec<i8> = (0..n).map(|_| draw()).collect();
    let beta: Vec<i8> = (0..n).map(|_| draw()).collect();
    NoisePath {
        eps,
        beta,
        seed,
        index,
    }
}

/// Partial sums of the two walks at the grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkValues {
    pub b: Vec<f64>,
    pub w: Vec<f64>,
}

impl WalkValues {
    /// `B_T - B_{t_j}` for every `j`.
    pub fn backward_increments(&self) -> Vec<f64> {
        let bt = *self.b.last().expect("walk has at least one point");
        self.b.iter().map(|b| bt - b).collect()
    }
}

pub fn walk_values(path: &NoisePath, grid: &TimeGrid) -> Result<WalkValues> {
    let n = grid.steps();
    if path.eps.len() != n || path.beta.len() != n {
        return Err(Error::InvalidArgument(format!(
            "path has {} / {} signs, grid has {n} steps",
            path.eps.len(),
            path.beta.len()
        )));
    }
    Ok(WalkValues {
        b: scaled_prefix_sums(&path.eps, grid.sqrt_delta()),
        w: scaled_prefix_sums(&path.beta, grid.sqrt_delta()),
    })
}

/// `[0, s*x_1, s*(x_1+x_2), ...]`. Sums are taken over integers first so
/// that every walk value is an exact multiple of `s`.
pub fn scaled_prefix_sums(signs: &[i8], scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(signs.len() + 1);
    let mut acc: i64 = 0;
    out.push(0.0);
    for &s in signs {
        acc += i64::from(s);
        out.push(acc as f64 * scale);
    }
    out
}

/// The `k`-th sign sequence of length `n` in enumeration order: position 0 is
/// the most significant bit, bit 0 is `+1` and bit 1 is `-1`.
pub fn sign_sequence(n: usize, k: u64) -> Vec<i8> {
    (0..n)
        .map(|pos| {
            let bit = (k >> (n - 1 - pos)) & 1;
            if bit == 0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Iterator over all `2^n` sign sequences, see [`enumerate_sign_sequences`].
#[derive(Debug, Clone)]
pub struct SignSequences {
    n: usize,
    next: u64,
    end: u64,
}

impl Iterator for SignSequences {
    type Item = Vec<i8>;

    fn next(&mut self) -> Option<Vec<i8>> {
        if self.next >= self.end {
            return None;
        }
        let seq = sign_sequence(self.n, self.next);
        self.next += 1;
        Some(seq)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SignSequences {}

/// All sign sequences of length `n` in lexicographic order (`+1` before `-1`).
pub fn enumerate_sign_sequences(n: usize) -> Result<SignSequences> {
    check_enumeration_cap(n, ENUMERATION_CAP)?;
    Ok(SignSequences {
        n,
        next: 0,
        end: 1u64 << n,
    })
}

pub(crate) fn check_enumeration_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(Error::ResourceLimit { requested: n, cap })
    } else {
        Ok(())
    }
}

/// Probability of each node of level `level` under the symmetric walk,
/// `C(level, i) / 2^level`.
pub fn node_probabilities(level: usize) -> Vec<f64> {
    let mut p = vec![1.0];
    for _ in 0..level {
        let mut next = vec![0.0; p.len() + 1];
        for (i, &v) in p.iter().enumerate() {
            next[i] += 0.5 * v;
            next[i + 1] += 0.5 * v;
        }
        p = next;
    }
    p
}

/// Pairwise summation in fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

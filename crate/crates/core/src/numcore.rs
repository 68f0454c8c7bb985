//! Deterministic numeric primitives: flat parameter vectors, vector algebra,
//! cosine distance, and seeded randomness.
//!
//! Everything here is pure and re-entrant; values are immutable after
//! construction and safe to share across workers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat container of 64-bit parameters for one model part.
///
/// Invariants: every value is finite and the length never changes after
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps a value vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ParamVector::new",
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Size of the vector when transmitted, in bytes (8 per value).
    pub fn byte_size(&self) -> u64 {
        self.values.len() as u64 * 8
    }
}

/// `result[i] = sum_k weights[k] * vectors[k][i]`.
///
/// Weights are not normalized here; callers that want a convex combination
/// must pass weights summing to one.
pub fn weighted_sum(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    if weights.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidWeight(w));
    }
    let len = vectors[0].len();
    let mut acc = vec![0.0; len];
    for (vector, &weight) in vectors.iter().zip(weights) {
        if vector.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: vector.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(vector.as_slice()) {
            *a += weight * v;
        }
    }
    ParamVector::new(acc)
}

/// Cosine distance `1 - a.b / (|a| |b|)`, in `[0, 2]`.
///
/// The norm product is computed as `sqrt(dot(a,a) * dot(b,b))` so that
/// identical or exactly scaled inputs yield exactly zero.
pub fn cosine_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    cosine_distance_slices(a.as_slice(), b.as_slice())
}

/// Slice form of [`cosine_distance`] for raw feature buffers.
pub fn cosine_distance_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let cos = (dot / (norm_a * norm_b).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Deterministic seeded random stream.
///
/// Identical seed gives an identical stream across runs and platforms. All
/// derived draws (ranges, shuffles, subsets, gaussians) are implemented on
/// top of the raw stream so their behavior is pinned by this crate.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream for a tagged sub-task (one per client,
    /// one for selection, ...). Same parent seed + same tag = same stream.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(mix(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection sampling.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard gaussian via Box-Muller (two uniforms per draw).
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, uniform over k-subsets.
    pub fn choice_k(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::Selection { k, n });
        }
        // Partial Fisher-Yates: the first k slots of a full shuffle.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

/// SplitMix64 finalizer; decorrelates derived seeds.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn weighted_sum_midpoint() {
        let out = weighted_sum(&[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn weighted_sum_identity() {
        let out = weighted_sum(&[pv(&[5.0, 7.0])], &[1.0]).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 7.0]);
    }

    #[test]
    fn weighted_sum_three_vectors() {
        // Expected values hand-computed with an independent scalar loop.
        let out = weighted_sum(
            &[pv(&[1.0, 0.0]), pv(&[0.0, 1.0]), pv(&[1.0, 1.0])],
            &[0.2, 0.3, 0.5],
        )
        .unwrap();
        assert!((out.as_slice()[0] - 0.7).abs() < 1e-15);
        assert!((out.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_rejects_bad_input() {
        assert!(matches!(
            weighted_sum(&[], &[]),
            Err(Error::EmptyAggregation)
        ));
        assert!(matches!(
            weighted_sum(&[pv(&[1.0]), pv(&[1.0, 2.0])], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            weighted_sum(&[pv(&[1.0])], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            weighted_sum(&[pv(&[1.0])], &[-0.1]),
            Err(Error::InvalidWeight(_))
        ));
    }

    #[test]
    fn cosine_distance_fixtures() {
        let d = cosine_distance(&pv(&[1.0, 2.0, 3.0]), &pv(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(d, 0.0);
        let d = cosine_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert_eq!(d, 1.0);
        let d = cosine_distance(&pv(&[1.0, 0.0]), &pv(&[-1.0, 0.0])).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn cosine_distance_zero_norm_errors() {
        assert!(matches!(
            cosine_distance(&pv(&[0.0, 0.0]), &pv(&[1.0, 0.0])),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cosine_distance_scale_invariant_and_symmetric() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let a: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect();
            let c = rng.next_f64() * 10.0 + 0.01;
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            let (a, b, scaled) = (pv(&a), pv(&b), pv(&scaled));
            let d_ab = cosine_distance(&a, &b).unwrap();
            let d_sb = cosine_distance(&scaled, &b).unwrap();
            assert!((d_ab - d_sb).abs() < 1e-12, "{d_ab} vs {d_sb}");
            let d_ba = cosine_distance(&b, &a).unwrap();
            assert_eq!(d_ab, d_ba);
            assert!((0.0..=2.0).contains(&d_ab));
        }
    }

    #[test]
    fn weighted_sum_linearity() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let vectors: Vec<ParamVector> = (0..4)
                .map(|_| pv(&(0..5).map(|_| rng.next_gaussian()).collect::<Vec<_>>()))
                .collect();
            let p: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
            let q: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
            let (alpha, beta) = (rng.next_f64() * 2.0, rng.next_f64() * 2.0);
            let combo: Vec<f64> = p
                .iter()
                .zip(&q)
                .map(|(pi, qi)| alpha * pi + beta * qi)
                .collect();
            let lhs = weighted_sum(&vectors, &combo).unwrap();
            let sp = weighted_sum(&vectors, &p).unwrap();
            let sq = weighted_sum(&vectors, &q).unwrap();
            for i in 0..5 {
                let rhs = alpha * sp.as_slice()[i] + beta * sq.as_slice()[i];
                assert!((lhs.as_slice()[i] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rng_deterministic_per_seed() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut c = Rng::new(43);
        assert_ne!(xs[0], c.next_u64());
    }

    #[test]
    fn choice_k_basic() {
        let mut rng = Rng::new(1);
        let mut full = rng.choice_k(9, 9).unwrap();
        full.sort_unstable();
        assert_eq!(full, (0..9).collect::<Vec<_>>());

        let t1 = Rng::new(42).choice_k(9, 3).unwrap();
        let t2 = Rng::new(42).choice_k(9, 3).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 3);

        assert!(matches!(
            Rng::new(0).choice_k(3, 4),
            Err(Error::Selection { k: 4, n: 3 })
        ));
    }

    #[test]
    fn choice_k_uniform_frequency() {
        // Monte Carlo: single draws from [0,5) over fresh seeds land near 1/5.
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for seed in 0..draws {
            let idx = Rng::new(seed as u64).choice_k(5, 1).unwrap()[0];
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn gaussian_moments_sane() {
        let mut rng = Rng::new(5);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn param_vector_rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    }
}

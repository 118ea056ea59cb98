//! Pairwise merging of normalization statistics.
//!
//! Distributed LayerNorm needs each shard's element count, mean, and
//! population variance; RMSNorm only needs the squared sum. Merging two
//! shards' statistics is exact up to rounding, so a tree of merges over any
//! partition reproduces the direct full-vector statistics.

use crate::tensor::Real;

/// Statistics of one vector shard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats<T: Real> {
    /// Element count (≥ 1).
    pub count: u64,
    /// Mean.
    pub mean: T,
    /// Population variance (≥ 0).
    pub variance: T,
    /// Sum of squares, for the RMSNorm path.
    pub sq_sum: T,
}

impl<T: Real> NormStats<T> {
    /// Direct statistics of a shard.
    pub fn of_slice(data: &[T]) -> Option<Self> {
        if data.is_empty() {
            return None;
        }
        let n = T::from_f64(data.len() as f64);
        let mut sum = T::zero();
        let mut sq = T::zero();
        for &v in data {
            sum = sum + v;
            sq = sq + v * v;
        }
        let mean = sum / n;
        let mut var = T::zero();
        for &v in data {
            let d = v - mean;
            var = var + d * d;
        }
        Some(Self { count: data.len() as u64, mean, variance: var / n, sq_sum: sq })
    }
}

/// Merge two shards' statistics:
/// `μ = (n₁μ₁ + n₂μ₂)/(n₁+n₂)`,
/// `σ² = (n₁σ₁² + n₂σ₂²)/(n₁+n₂) + n₁n₂(μ₁−μ₂)²/(n₁+n₂)²`,
/// and the squared sums add.
pub fn merge_norm_stats<T: Real>(a: &NormStats<T>, b: &NormStats<T>) -> NormStats<T> {
    assert!(a.count >= 1 && b.count >= 1, "merge requires non-empty shards");
    let n1 = T::from_f64(a.count as f64);
    let n2 = T::from_f64(b.count as f64);
    let n = n1 + n2;
    let mean = (n1 * a.mean + n2 * b.mean) / n;
    let d = a.mean - b.mean;
    let variance = (n1 * a.variance + n2 * b.variance) / n + n1 * n2 * d * d / (n * n);
    NormStats { count: a.count + b.count, mean, variance, sq_sum: a.sq_sum + b.sq_sum }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_symmetry() {
        let a = NormStats { count: 4, mean: 0.0f64, variance: 0.0, sq_sum: 0.0 };
        let b = NormStats { count: 4, mean: 2.0f64, variance: 0.0, sq_sum: 16.0 };
        let m = merge_norm_stats(&a, &b);
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.variance, 1.0);
        assert_eq!(m.sq_sum, 16.0);
        assert_eq!(m.count, 8);
    }

    #[test]
    fn equal_means_leave_mean_unchanged() {
        let a = NormStats { count: 10, mean: 3.5f64, variance: 1.25, sq_sum: 135.0 };
        let b = NormStats { count: 90, mean: 3.5f64, variance: 0.75, sq_sum: 1170.0 };
        let m = merge_norm_stats(&a, &b);
        assert_eq!(m.mean, 3.5);
    }

    #[test]
    fn merge_matches_direct_stats_any_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..200);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let direct = NormStats::of_slice(&data).unwrap();
            let k = rng.gen_range(1..n);
            let a = NormStats::of_slice(&data[..k]).unwrap();
            let b = NormStats::of_slice(&data[k..]).unwrap();
            let merged = merge_norm_stats(&a, &b);
            assert!((merged.mean - direct.mean).abs() < 1e-12);
            assert!((merged.variance - direct.variance).abs() < 1e-12);
            assert!((merged.sq_sum - direct.sq_sum).abs() < 1e-9 * direct.sq_sum.abs().max(1.0));
            // Internal consistency: sq_sum ≈ n(σ² + μ²).
            let implied = (merged.count as f64) * (merged.variance + merged.mean * merged.mean);
            assert!((merged.sq_sum - implied).abs() < 1e-9 * implied.abs().max(1.0));
        }
    }

    #[test]
    fn merge_independent_of_split_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let take = |k: usize| {
            merge_norm_stats(
                &NormStats::of_slice(&data[..k]).unwrap(),
                &NormStats::of_slice(&data[k..]).unwrap(),
            )
        };
        let first = take(1);
        for k in 2..data.len() {
            let m = take(k);
            assert!((m.mean - first.mean).abs() < 1e-12);
            assert!((m.variance - first.variance).abs() < 1e-12);
        }
    }
}

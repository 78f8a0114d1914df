//! Rank permutations and the absolute-rank-difference distance that the
//! sequential watermark is verified against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ascending ranks of a probability sequence: `ranks[i]` is the 1-based
/// rank of class `i` (1 = smallest probability).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub ranks: Vec<usize>,
}

impl PermutationRecord {
    /// The watermark's registered reference: class i carries rank i+1
    /// (probabilities ascend along the verification-class order).
    pub fn identity(n: usize) -> Self {
        Self {
            ranks: (1..=n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.ranks.len();
        let mut seen = vec![false; n + 1];
        self.ranks.iter().all(|&r| {
            if r >= 1 && r <= n && !seen[r] {
                seen[r] = true;
                true
            } else {
                false
            }
        })
    }
}

/// Ascending ranks of a finite sequence; ties resolve stably (the
/// smaller index receives the smaller rank).
pub fn rank_permutation(values: &[f64]) -> Result<PermutationRecord> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "probability sequence".into(),
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0usize; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank + 1;
    }
    Ok(PermutationRecord { ranks })
}

/// Sum of absolute rank differences (Spearman footrule). Always even;
/// bounded by floor(n^2 / 2).
pub fn rank_distance(a: &PermutationRecord, b: &PermutationRecord) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.ranks
        .iter()
        .zip(&b.ranks)
        .map(|(&x, &y)| x.abs_diff(y))
        .sum())
}

/// Maximum attainable distance for n classes.
pub fn max_distance(n: usize) -> usize {
    n * n / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute-force reference: walk both rank vectors and sum
    /// |a_i - b_i| with explicit loops and i64 arithmetic.
    fn brute_force_distance(a: &[usize], b: &[usize]) -> usize {
        let mut total: i64 = 0;
        for i in 0..a.len() {
            let d = a[i] as i64 - b[i] as i64;
            total += d.abs();
        }
        total as usize
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for smaller in permutations(n - 1) {
            for pos in 0..=smaller.len() {
                let mut p = smaller.clone();
                p.insert(pos, n);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            rank_permutation(&[0.1, 0.2, 0.3, 0.4]).unwrap().ranks,
            vec![1, 2, 3, 4]
        );
        assert_eq!(
            rank_permutation(&[0.4, 0.3, 0.2, 0.1]).unwrap().ranks,
            vec![4, 3, 2, 1]
        );
        // stable tie-break: the earlier 0.2 outranks the later one
        assert_eq!(rank_permutation(&[0.2, 0.2, 0.1]).unwrap().ranks, vec![2, 3, 1]);
    }

    #[test]
    fn rank_rejects_non_finite() {
        assert!(rank_permutation(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn distance_examples() {
        let id = PermutationRecord::identity(4);
        assert_eq!(rank_distance(&id, &id).unwrap(), 0);
        let rev = PermutationRecord {
            ranks: vec![4, 3, 2, 1],
        };
        assert_eq!(rank_distance(&id, &rev).unwrap(), 8);
        let adjacent = PermutationRecord {
            ranks: vec![2, 1, 3, 4],
        };
        assert_eq!(rank_distance(&id, &adjacent).unwrap(), 2);
    }

    #[test]
    fn distance_length_mismatch_errors() {
        let a = PermutationRecord::identity(3);
        let b = PermutationRecord::identity(4);
        assert!(rank_distance(&a, &b).is_err());
    }

    #[test]
    fn exhaustive_pairs_match_brute_force_up_to_n5() {
        for n in 2..=5 {
            let perms = permutations(n);
            let mut max_seen = 0;
            for pa in &perms {
                for pb in &perms {
                    let a = PermutationRecord { ranks: pa.clone() };
                    let b = PermutationRecord { ranks: pb.clone() };
                    let d = rank_distance(&a, &b).unwrap();
                    assert_eq!(d, brute_force_distance(pa, pb));
                    assert_eq!(d % 2, 0, "distance must be even: {pa:?} vs {pb:?}");
                    assert!(d <= max_distance(n));
                    assert_eq!(d, rank_distance(&b, &a).unwrap());
                    max_seen = max_seen.max(d);
                }
            }
            assert_eq!(max_seen, max_distance(n));
            // extremes: identity attains 0, reversal attains the bound
            let id = PermutationRecord::identity(n);
            let rev = PermutationRecord {
                ranks: (1..=n).rev().collect(),
            };
            assert_eq!(rank_distance(&id, &id).unwrap(), 0);
            assert_eq!(rank_distance(&id, &rev).unwrap(), max_distance(n));
        }
    }

    #[test]
    fn rank_invariant_under_increasing_transforms() {
        let values = [0.05, 0.4, 0.1, 0.31];
        let base = rank_permutation(&values).unwrap();
        let transforms: [fn(f64) -> f64; 3] =
            [|v| v.exp(), |v| 3.0 * v + 10.0, |v| v.powi(3) + v];
        for t in transforms {
            let mapped: Vec<f64> = values.iter().map(|&v| t(v)).collect();
            assert_eq!(rank_permutation(&mapped).unwrap(), base);
        }
    }
}

//! Visible / masked / predicted token partitions.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("token count must be at least 1")]
    NoTokens,
    #[error("mask ratio {0} outside (0, 1)")]
    MaskRatio(f64),
    #[error("prediction ratio {gamma} must lie in (0, mask ratio {p}]")]
    PredictionRatio { gamma: f64, p: f64 },
    #[error("prediction ratio {gamma} selects no tokens out of {n}")]
    NothingToPredict { gamma: f64, n: usize },
}

/// `⌊ratio · n⌋`, tolerant of the representation error in decimal ratios
/// such as `0.29 · 100`.
pub fn floor_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Partition of `num_tokens` patch indices (class token excluded).
///
/// `visible` and `masked` partition `0..num_tokens`; `predicted` is the subset
/// of `masked` the decoder reconstructs and the loss supervises. All lists are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub num_tokens: usize,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    pub seed: u64,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Uniform integer in `0..bound` by rejection on the top of a 64-bit draw.
fn below(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    let bound = bound as u64;
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % bound) as usize;
        }
    }
}

/// Fisher–Yates shuffle driven by the given generator.
fn shuffle(rng: &mut ChaCha8Rng, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

impl MaskPlan {
    /// Seeded plan: the visible set is the first `N − ⌊pN⌋` entries of a
    /// uniform permutation, the predicted set the first `⌊γN⌋` entries of a
    /// uniform permutation of the masked set.
    pub fn new(num_tokens: usize, mask_ratio: f64, prediction_ratio: f64, seed: u64) -> Result<Self, MaskError> {
        if num_tokens == 0 {
            return Err(MaskError::NoTokens);
        }
        if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
            return Err(MaskError::MaskRatio(mask_ratio));
        }
        if !(prediction_ratio > 0.0 && prediction_ratio <= mask_ratio) {
            return Err(MaskError::PredictionRatio { gamma: prediction_ratio, p: mask_ratio });
        }
        let num_masked = floor_count(mask_ratio, num_tokens);
        let num_predicted = floor_count(prediction_ratio, num_tokens).min(num_masked);
        if num_predicted == 0 {
            return Err(MaskError::NothingToPredict { gamma: prediction_ratio, n: num_tokens });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..num_tokens).collect();
        shuffle(&mut rng, &mut order);
        let split = num_tokens - num_masked;
        let mut visible = order[..split].to_vec();
        let mut masked = order[split..].to_vec();
        let mut predicted = masked.clone();
        shuffle(&mut rng, &mut predicted);
        predicted.truncate(num_predicted);
        visible.sort_unstable();
        masked.sort_unstable();
        predicted.sort_unstable();
        Ok(MaskPlan { num_tokens, mask_ratio, prediction_ratio, seed, visible, masked, predicted })
    }

    /// 0/1 mask vector, 1 where the patch is masked.
    pub fn mask_vector(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.num_tokens];
        for &i in &self.masked {
            m[i] = 1;
        }
        m
    }

    /// Position of each predicted index within `masked`.
    pub fn predicted_in_masked(&self) -> Vec<usize> {
        self.predicted
            .iter()
            .map(|p| self.masked.binary_search(p).expect("predicted ⊆ masked"))
            .collect()
    }

    /// Copy of the plan predicting exactly `subset` (which must lie in `masked`).
    pub fn with_predicted(&self, subset: &[usize]) -> Result<Self, MaskError> {
        if subset.is_empty() {
            return Err(MaskError::NothingToPredict { gamma: 0.0, n: self.num_tokens });
        }
        let mut predicted = subset.to_vec();
        predicted.sort_unstable();
        predicted.dedup();
        if predicted.iter().any(|p| self.masked.binary_search(p).is_err()) {
            return Err(MaskError::PredictionRatio { gamma: f64::NAN, p: self.mask_ratio });
        }
        Ok(MaskPlan {
            prediction_ratio: predicted.len() as f64 / self.num_tokens as f64,
            predicted,
            ..self.clone()
        })
    }
}

/// Pairwise token-group indicators of a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMatrices {
    pub n: usize,
    /// `m·mᵀ`, row-major `n×n`.
    pub mask_to_mask: Vec<bool>,
    /// `m·(1−m)ᵀ`, row-major `n×n`.
    pub mask_to_visible: Vec<bool>,
}

impl GroupMatrices {
    pub fn from_mask(m: &[u8]) -> Self {
        let n = m.len();
        let mut mask_to_mask = vec![false; n * n];
        let mut mask_to_visible = vec![false; n * n];
        for i in 0..n {
            if m[i] == 0 {
                continue;
            }
            for j in 0..n {
                mask_to_mask[i * n + j] = m[j] == 1;
                mask_to_visible[i * n + j] = m[j] == 0;
            }
        }
        GroupMatrices { n, mask_to_mask, mask_to_visible }
    }

    pub fn mask_to_mask_count(&self) -> usize {
        self.mask_to_mask.iter().filter(|&&b| b).count()
    }

    pub fn mask_to_visible_count(&self) -> usize {
        self.mask_to_visible.iter().filter(|&&b| b).count()
    }
}

/// Outer-product group matrices `m·mᵀ` and `m·(1−m)ᵀ` of a plan.
pub fn group_matrices(plan: &MaskPlan) -> GroupMatrices {
    GroupMatrices::from_mask(&plan.mask_vector())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_b_geometry_counts() {
        let plan = MaskPlan::new(196, 0.75, 0.75, 0).unwrap();
        assert_eq!(plan.visible.len(), 49);
        assert_eq!(plan.masked.len(), 147);
        assert_eq!(plan.predicted, plan.masked);

        let plan = MaskPlan::new(196, 0.75, 0.25, 0).unwrap();
        assert_eq!(plan.predicted.len(), 49);
        assert_eq!(plan.predicted.len() * 3, plan.masked.len());
    }

    #[test]
    fn partition_and_subset_laws() {
        for seed in 0..50 {
            let plan = MaskPlan::new(37, 0.6, 0.3, seed).unwrap();
            let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert!(plan.predicted.iter().all(|p| plan.masked.contains(p)));
            for list in [&plan.visible, &plan.masked, &plan.predicted] {
                assert!(list.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn rejects_bad_ratios() {
        assert_eq!(
            MaskPlan::new(196, 0.75, 0.9, 0),
            Err(MaskError::PredictionRatio { gamma: 0.9, p: 0.75 })
        );
        assert!(matches!(MaskPlan::new(10, 0.5, 0.05, 0), Err(MaskError::NothingToPredict { .. })));
        assert!(matches!(MaskPlan::new(0, 0.5, 0.5, 0), Err(MaskError::NoTokens)));
        assert!(matches!(MaskPlan::new(10, 1.0, 0.5, 0), Err(MaskError::MaskRatio(_))));
    }

    #[test]
    fn seeded_determinism() {
        let a = MaskPlan::new(196, 0.75, 0.25, 42).unwrap();
        let b = MaskPlan::new(196, 0.75, 0.25, 42).unwrap();
        let c = MaskPlan::new(196, 0.75, 0.25, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.visible, c.visible);
    }

    #[test]
    fn smallest_group_matrices() {
        let g = GroupMatrices::from_mask(&[0, 1]);
        assert_eq!(g.mask_to_mask, vec![false, false, false, true]);
        assert_eq!(g.mask_to_visible, vec![false, false, true, false]);
    }

    #[test]
    fn group_matrix_counts_and_row_sums() {
        let plan = MaskPlan::new(196, 0.75, 0.75, 7).unwrap();
        let g = group_matrices(&plan);
        assert_eq!(g.mask_to_mask_count(), 147 * 147);
        assert_eq!(g.mask_to_visible_count(), 147 * 49);
        let m = plan.mask_vector();
        for i in 0..196 {
            let row = &g.mask_to_visible[i * 196..(i + 1) * 196];
            let s = row.iter().filter(|&&b| b).count();
            assert_eq!(s, if m[i] == 1 { 49 } else { 0 });
            let mm = g.mask_to_mask[i * 196..(i + 1) * 196].iter().filter(|&&b| b).count();
            // disjoint and together covering exactly the masked rows
            assert!(row.iter().zip(&g.mask_to_mask[i * 196..]).all(|(a, b)| !(*a && *b)));
            assert_eq!(s + mm, if m[i] == 1 { 196 } else { 0 });
        }
    }

    #[test]
    fn visibility_frequency_is_uniform() {
        let mut counts = [0usize; 196];
        let trials = 10_000;
        for seed in 0..trials {
            for &v in &MaskPlan::new(196, 0.75, 0.75, seed as u64).unwrap().visible {
                counts[v] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
    }
}

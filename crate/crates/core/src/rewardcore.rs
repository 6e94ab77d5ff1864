//! Per-sample reward vectors and their fusion into group-normalized
//! advantages: each reward dimension is z-scored over the group with the
//! population standard deviation, then the z-scores are summed.

use serde::{Deserialize, Serialize};

use crate::detectors::{AlignmentClassifier, FeatureDetector, SemanticDetector};
use crate::numkit::Scalar;
use crate::synthworld::Sample;
use crate::{Error, Result};

/// Added to every standard deviation before dividing.
pub const STD_GUARD: f64 = 1e-8;

pub const DIMENSIONS: [&str; 3] = ["sem", "feat", "align"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RewardVector<T = f64> {
    pub sem: T,
    pub feat: T,
    pub align: T,
}

impl<T: Scalar> RewardVector<T> {
    pub fn new(sem: T, feat: T, align: T) -> Self {
        RewardVector { sem, feat, align }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.sem, self.feat, self.align]
    }

    /// Plain sum of the three raw scores.
    pub fn total(self) -> T {
        self.sem + self.feat + self.align
    }
}

/// Whether z-scores are taken per prompt group or across every group of a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageScope {
    #[default]
    Group,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdvantageGroup<T = f64> {
    pub rewards: Vec<RewardVector<T>>,
    pub advantages: Vec<T>,
    pub mean: [T; 3],
    pub std: [T; 3],
}

fn dim_stats<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> (T, T, bool) {
    let n = T::from_usize(values.clone().count()).expect("count fits");
    let mean = values.clone().fold(T::zero(), |a, v| a + v) / n;
    let var = values.clone().fold(T::zero(), |a, v| a + (v - mean) * (v - mean)) / n;
    let mut it = values;
    let first = it.next().expect("non-empty");
    let constant = it.all(|v| v == first);
    (mean, var.sqrt(), constant)
}

/// Fused advantages with unit weights.
pub fn fuse_advantages<T: Scalar>(group: &[RewardVector<T>]) -> Result<AdvantageGroup<T>> {
    fuse_advantages_weighted(group, [T::one(); 3])
}

/// `A_i = sum_k w_k (r_i^k - mean_k) / (std_k + guard)`. A dimension that is
/// constant over the group contributes exactly zero.
pub fn fuse_advantages_weighted<T: Scalar>(
    group: &[RewardVector<T>],
    weights: [T; 3],
) -> Result<AdvantageGroup<T>> {
    let mut out = fuse_over(group, group, weights)?;
    out.rewards = group.to_vec();
    Ok(out)
}

/// Normalizes `group` with statistics taken over `population`.
fn fuse_over<T: Scalar>(
    group: &[RewardVector<T>],
    population: &[RewardVector<T>],
    weights: [T; 3],
) -> Result<AdvantageGroup<T>> {
    if population.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage normalization needs at least 2 samples, got {}",
            population.len()
        )));
    }
    let guard = T::lit(STD_GUARD);
    let mut mean = [T::zero(); 3];
    let mut std = [T::zero(); 3];
    let mut constant = [false; 3];
    for k in 0..3 {
        let (m, s, c) = dim_stats(population.iter().map(|r| r.to_array()[k]));
        mean[k] = m;
        std[k] = s;
        constant[k] = c;
    }
    let advantages = group
        .iter()
        .map(|r| {
            let a = r.to_array();
            (0..3).fold(T::zero(), |acc, k| {
                if constant[k] {
                    acc
                } else {
                    acc + weights[k] * (a[k] - mean[k]) / (std[k] + guard)
                }
            })
        })
        .collect();
    Ok(AdvantageGroup {
        rewards: group.to_vec(),
        advantages,
        mean,
        std,
    })
}

/// Fuses every group of a step under the chosen scope.
pub fn fuse_scoped<T: Scalar>(
    groups: &[Vec<RewardVector<T>>],
    scope: AdvantageScope,
    weights: [T; 3],
) -> Result<Vec<AdvantageGroup<T>>> {
    match scope {
        AdvantageScope::Group => groups
            .iter()
            .map(|g| fuse_advantages_weighted(g, weights))
            .collect(),
        AdvantageScope::Batch => {
            let all: Vec<_> = groups.iter().flatten().copied().collect();
            groups.iter().map(|g| fuse_over(g, &all, weights)).collect()
        }
    }
}

/// The three frozen reward models. The held-out detector is deliberately absent.
#[derive(Clone, Copy)]
pub struct RewardModels<'a> {
    pub semantic: &'a SemanticDetector,
    pub feature: &'a FeatureDetector,
    pub alignment: &'a AlignmentClassifier,
}

pub fn score_sample(
    sample: &Sample,
    user_class: usize,
    models: &RewardModels<'_>,
) -> Result<RewardVector<f64>> {
    Ok(RewardVector {
        sem: crate::detectors::semantic_reward(models.semantic, sample),
        feat: crate::detectors::feature_reward(models.feature, sample),
        align: crate::detectors::alignment_reward(models.alignment, sample, user_class)?,
    })
}

pub fn score_batch(
    samples: &[Sample],
    user_classes: &[usize],
    models: &RewardModels<'_>,
) -> Result<Vec<RewardVector<f64>>> {
    if samples.len() != user_classes.len() {
        return Err(Error::Shape("one user class per sample".into()));
    }
    samples
        .iter()
        .zip(user_classes)
        .map(|(s, &k)| score_sample(s, k, models))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rv(a: f64, b: f64, c: f64) -> RewardVector {
        RewardVector::new(a, b, c)
    }

    /// Independent re-computation: two-pass mean / population std / sum.
    fn oracle(group: &[RewardVector]) -> Vec<f64> {
        let n = group.len() as f64;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|k| group.iter().map(|r| r.to_array()[k]).collect())
            .collect();
        group
            .iter()
            .enumerate()
            .map(|(i, _)| {
                cols.iter()
                    .map(|c| {
                        let m: f64 = c.iter().sum::<f64>() / n;
                        let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                        if s == 0.0 {
                            0.0
                        } else {
                            (c[i] - m) / (s + STD_GUARD)
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn identical_group_gives_zero_advantages() {
        let g = vec![rv(0.1, 0.7, 0.3); 5];
        let a = fuse_advantages(&g).unwrap();
        assert!(a.advantages.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_triple() {
        let g = vec![rv(0.1, 0.5, 0.5), rv(0.2, 0.5, 0.5), rv(0.3, 0.5, 0.5)];
        let a = fuse_advantages(&g).unwrap().advantages;
        let want = [-1.2247, 0.0, 1.2247];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() <= 1e-4, "{a:?}");
        }
    }

    #[test]
    fn single_sample_rejected() {
        assert!(fuse_advantages(&[rv(0.1, 0.2, 0.3)]).is_err());
    }

    #[test]
    fn recorded_stats_reproduce_advantages() {
        let g = vec![rv(0.1, 0.9, 0.3), rv(0.4, 0.2, 0.35), rv(0.8, 0.5, 0.31)];
        let a = fuse_advantages(&g).unwrap();
        for (r, adv) in g.iter().zip(&a.advantages) {
            let re: f64 = (0..3)
                .map(|k| (r.to_array()[k] - a.mean[k]) / (a.std[k] + STD_GUARD))
                .sum();
            assert!((re - adv).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_scope_uses_pooled_statistics() {
        let g1 = vec![rv(0.1, 0.5, 0.5), rv(0.2, 0.5, 0.5)];
        let g2 = vec![rv(0.3, 0.5, 0.5), rv(0.4, 0.5, 0.5)];
        let out = fuse_scoped(&[g1.clone(), g2.clone()], AdvantageScope::Batch, [1.0; 3]).unwrap();
        let pooled: Vec<_> = g1.iter().chain(&g2).copied().collect();
        let want = oracle(&pooled);
        let got: Vec<f64> = out.iter().flat_map(|g| g.advantages.clone()).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generic_over_f32() {
        let g = vec![
            RewardVector::<f32>::new(0.1, 0.5, 0.5),
            RewardVector::new(0.3, 0.5, 0.5),
        ];
        let a = fuse_advantages(&g).unwrap();
        assert!((a.advantages[0] + 1.0).abs() < 1e-5);
    }

    fn group_strategy() -> impl Strategy<Value = Vec<RewardVector>> {
        prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 2..12)
            .prop_map(|v| v.into_iter().map(|(a, b, c)| rv(a, b, c)).collect())
    }

    proptest! {
        #[test]
        fn matches_oracle_and_sums_to_zero(g in group_strategy()) {
            let a = fuse_advantages(&g).unwrap().advantages;
            let want = oracle(&g);
            for (x, y) in a.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        }

        #[test]
        fn affine_rescale_of_one_dimension_is_invariant(
            g in group_strategy(), scale in 0.1..10.0f64, shift in -5.0..5.0f64, dim in 0usize..3
        ) {
            // keep the std guard's relative effect below the tolerance
            let col: Vec<f64> = g.iter().map(|r| r.to_array()[dim]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            prop_assume!(sd > 1e-2);
            let base = fuse_advantages(&g).unwrap().advantages;
            let moved: Vec<_> = g.iter().map(|r| {
                let mut a = r.to_array();
                a[dim] = scale * a[dim] + shift;
                rv(a[0], a[1], a[2])
            }).collect();
            let after = fuse_advantages(&moved).unwrap().advantages;
            for (x, y) in base.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn permutation_equivariant(g in group_strategy(), seed in 0u64..1000) {
            let mut idx: Vec<usize> = (0..g.len()).collect();
            crate::numkit::Rng::new(seed, 0).shuffle(&mut idx);
            let perm: Vec<_> = idx.iter().map(|&i| g[i]).collect();
            let a = fuse_advantages(&g).unwrap().advantages;
            let b = fuse_advantages(&perm).unwrap().advantages;
            for (j, &i) in idx.iter().enumerate() {
                prop_assert!((b[j] - a[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_own_reward_never_lowers_advantage(
            g in group_strategy(), who in 0usize..12, dim in 0usize..3, bump in 0.0..1.0f64
        ) {
            let who = who % g.len();
            let before = fuse_advantages(&g).unwrap().advantages[who];
            let mut h = g.clone();
            let mut a = h[who].to_array();
            a[dim] += bump;
            h[who] = rv(a[0], a[1], a[2]);
            let after = fuse_advantages(&h).unwrap().advantages[who];
            prop_assert!(after >= before - 1e-7);
        }
    }
}

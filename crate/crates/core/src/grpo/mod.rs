//! Group-relative policy optimization for both post-training stages.
//!
//! Stage 1 updates the prompt policy with per-token ratios against a frozen
//! generator; stage 2 updates the flow generator with per-step Gaussian
//! ratios over the stochastic window against a frozen policy. Both share the
//! clipped surrogate, the KL penalty against a frozen reference and the
//! fused group advantages from [`crate::rewardcore`].

mod stage1;
mod stage2;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numkit::Scalar;
use crate::rewardcore::{AdvantageScope, RewardVector, DIMENSIONS};
use crate::{Error, Result};

pub use stage1::{
    collect_stage1_groups, stage1_loss_and_grad, stage1_step, kl_token, Stage1Group, Stage1State,
};
pub use stage2::{
    collect_stage2_groups, kl_step, stage2_loss_and_grad, stage2_step, Stage2Group, Stage2State,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub groups_per_step: usize,
    pub steps: usize,
    /// Stage 2 only: length of the stochastic window.
    pub window_len: usize,
    /// Stage 2 only: fraction of prompts enriched by the frozen policy.
    pub rewrite_fraction: f64,
    pub advantage_scope: AdvantageScope,
    /// Weights of the semantic, feature and alignment z-scores.
    pub reward_weights: [f64; 3],
    pub inner_epochs: usize,
    /// Stage 2 only: independent `x_T` per branch instead of a shared prefix.
    pub fresh_noise_per_branch: bool,
    pub seed: u64,
}

impl GrpoConfig {
    pub fn stage1() -> Self {
        GrpoConfig::default()
    }

    pub fn stage2() -> Self {
        GrpoConfig {
            lr: 3e-5,
            groups_per_step: 12,
            ..GrpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(0.0..=1.0).contains(&self.rewrite_fraction) {
            return bad(format!(
                "rewrite_fraction must lie in [0, 1], got {}",
                self.rewrite_fraction
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.groups_per_step == 0 || self.inner_epochs == 0 || self.window_len == 0 {
            return bad("groups_per_step, inner_epochs and window_len must be positive".into());
        }
        if self.reward_weights.iter().any(|w| !w.is_finite()) {
            return bad("reward weights must be finite".into());
        }
        Ok(())
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            lr: 1e-4,
            groups_per_step: 32,
            steps: 230,
            window_len: 5,
            rewrite_fraction: 0.5,
            advantage_scope: AdvantageScope::Group,
            reward_weights: [1.0; 3],
            inner_epochs: 1,
            fresh_noise_per_branch: false,
            seed: 0,
        }
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate<T: Scalar>(rho: T, adv: T, eps: T) -> T {
    let clipped = rho.max(T::one() - eps).min(T::one() + eps);
    (rho * adv).min(clipped * adv)
}

/// Derivative of [`clipped_surrogate`] with respect to `rho`. Exactly zero in
/// the clip dead zone.
pub fn clipped_surrogate_grad<T: Scalar>(rho: T, adv: T, eps: T) -> T {
    if in_dead_zone(rho, adv, eps) {
        T::zero()
    } else {
        adv
    }
}

pub fn in_dead_zone<T: Scalar>(rho: T, adv: T, eps: T) -> bool {
    (adv > T::zero() && rho > T::one() + eps) || (adv < T::zero() && rho < T::one() - eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotRole {
    Current,
    Old,
    Reference,
}

/// A tagged parameter copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot<M> {
    pub role: SnapshotRole,
    pub params: M,
}

impl<M: Clone> PolicySnapshot<M> {
    pub fn of(role: SnapshotRole, params: &M) -> Self {
        PolicySnapshot {
            role,
            params: params.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanReward {
    pub sem: f64,
    pub feat: f64,
    pub align: f64,
}

/// One line of the metrics JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    pub step: usize,
    pub mean_reward: MeanReward,
    pub mean_advantage_abs: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wallclock_ms: Option<u64>,
}

/// Statistics gathered while evaluating the surrogate loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub max_abs_log_ratio: f64,
}

/// Per-sample rewards of one step, for the reward-trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub stage: u8,
    pub step: usize,
    pub group: usize,
    pub user_class: usize,
    pub rewards: Vec<RewardVector<f64>>,
    pub advantages: Vec<f64>,
}

pub(crate) fn mean_reward(groups: &[&[RewardVector<f64>]]) -> MeanReward {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for g in groups {
        for r in g.iter() {
            for (a, v) in acc.iter_mut().zip(r.to_array()) {
                *a += v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    debug_assert_eq!(DIMENSIONS.len(), 3);
    MeanReward {
        sem: acc[0] / n,
        feat: acc[1] / n,
        align: acc[2] / n,
    }
}

pub(crate) fn mean_abs(advs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = advs.fold((0.0, 0usize), |(s, n), a| (s + a.abs(), n + 1));
    s / n.max(1) as f64
}

/// Writes `value` to `<dir>/<name>` and returns the path.
pub(crate) fn dump_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let body = serde_json::to_vec_pretty(value)?;
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

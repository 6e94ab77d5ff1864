use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{
    clipped_surrogate, clipped_surrogate_grad, dump_json, in_dead_zone, mean_abs, mean_reward, GrpoConfig,
    LossStats, PolicySnapshot, SnapshotRole, StepMetrics,
};
use crate::flowgen::{sample_ode, FlowModel};
use crate::numkit::{Adam, AdamConfig, Params, Rng};
use crate::promptpolicy::{rollout, trace_trajectories, PromptPolicy, PromptTrajectory};
use crate::rewardcore::{fuse_scoped, score_batch, RewardModels, RewardVector};
use crate::synthworld::{user_prompt, PromptSeq, Sample, WorldSpec, T_MAX};
use crate::{Adam64, Error, Result};

/// One prompt's worth of stage-1 rollouts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage1Group {
    pub user: PromptSeq,
    pub trajectories: Vec<PromptTrajectory>,
    pub samples: Vec<Sample>,
    pub rewards: Vec<RewardVector<f64>>,
    pub advantages: Vec<f64>,
}

pub struct Stage1State {
    pub policy: PromptPolicy,
    pub reference: PolicySnapshot<PromptPolicy>,
    pub optimizer: Adam64,
    pub step: usize,
}

impl Stage1State {
    /// Starts a stage with the reference frozen at `policy`.
    pub fn new(policy: PromptPolicy, cfg: &GrpoConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Stage1State {
            reference: PolicySnapshot::of(SnapshotRole::Reference, &policy),
            policy,
            optimizer: Adam::new(AdamConfig::with_lr(cfg.lr)),
            step: 0,
        })
    }
}

pub(crate) fn kl_from_logprobs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(p, _)| p.is_finite())
        .map(|(p, q)| p.exp() * (p - q))
        .sum()
}

/// Exact categorical `KL(policy || reference)` at a recorded position.
pub fn kl_token(
    policy: &PromptPolicy,
    reference: &PromptPolicy,
    traj: &PromptTrajectory,
    position: usize,
) -> Result<f64> {
    if position == 0 || position >= T_MAX {
        return Err(Error::InvalidArgument(format!("position {position} out of range")));
    }
    let prefix = &traj.output.tokens()[..position];
    let k = traj.user.user_class();
    let lp = policy.logprobs_at(k, prefix)?;
    let lq = reference.logprobs_at(k, prefix)?;
    Ok(kl_from_logprobs(&lp, &lq).max(0.0))
}

/// Rolls out every group under `old`, renders with the frozen generator,
/// scores and fuses advantages.
pub fn collect_stage1_groups(
    old: &PromptPolicy,
    generator: &FlowModel,
    models: &RewardModels<'_>,
    world: &WorldSpec,
    cfg: &GrpoConfig,
    rng: &Rng,
) -> Result<Vec<Stage1Group>> {
    let mut groups = (0..cfg.groups_per_step)
        .into_par_iter()
        .map(|g| {
            let grng = rng.child(g as u64);
            let k = grng.child_named("class").below(world.num_classes);
            let user = user_prompt(world, k)?;
            let trajectories = rollout(old, &user, cfg.group_size, &grng.child_named("rollout"))?;
            let gen_rng = grng.child_named("generate");
            let samples = trajectories
                .iter()
                .enumerate()
                .map(|(i, t)| Ok(sample_ode(generator, &t.output, &mut gen_rng.child(i as u64))?.0))
                .collect::<Result<Vec<_>>>()?;
            let rewards = score_batch(&samples, &vec![k; samples.len()], models)?;
            Ok(Stage1Group {
                user,
                trajectories,
                samples,
                rewards,
                advantages: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<Vec<RewardVector<f64>>> = groups.iter().map(|g| g.rewards.clone()).collect();
    for (g, a) in groups
        .iter_mut()
        .zip(fuse_scoped(&rewards, cfg.advantage_scope, cfg.reward_weights)?)
    {
        g.advantages = a.advantages;
    }
    Ok(groups)
}

/// Negated clipped objective with token ratios and exact KL, averaged over
/// groups, trajectories and the `T_MAX - 1` generated positions.
pub fn stage1_loss_and_grad(
    policy: &PromptPolicy,
    reference: &PromptPolicy,
    groups: &[Stage1Group],
    cfg: &GrpoConfig,
) -> Result<(f64, PromptPolicy, LossStats)> {
    let mut trajs = Vec::new();
    let mut advs = Vec::new();
    for g in groups {
        if g.advantages.len() != g.trajectories.len() {
            return Err(Error::Shape("one advantage per trajectory".into()));
        }
        for (t, a) in g.trajectories.iter().zip(&g.advantages) {
            trajs.push(t);
            advs.push(*a);
        }
    }
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let n_groups = groups.len() as f64;
    let group_size = (trajs.len() as f64) / n_groups;
    let c = 1.0 / (n_groups * group_size * (T_MAX - 1) as f64);
    let (pt, rows) = trace_trajectories(policy, &trajs)?;
    let (pr, _) = trace_trajectories(reference, &trajs)?;
    let vocab = *policy.vocabulary();
    let v = vocab.size();
    let eps = cfg.clip_eps;
    let beta = cfg.kl_beta;

    let mut loss = 0.0;
    for (t, a) in trajs.iter().zip(&advs) {
        // forced positions: ratio 1, no KL
        loss -= c * a * t.steps.iter().filter(|s| s.forced).count() as f64;
    }
    let mut up = Vec::with_capacity(rows.len() * v);
    let mut stats = LossStats::default();
    for (r, &(i, pos)) in rows.iter().enumerate() {
        let step = &trajs[i].steps[pos - 1];
        let y = vocab.index(step.token)?;
        let lp = &pt.logprobs[r];
        let lq = &pr.logprobs[r];
        let rho = (lp[y] - step.logprob_old).exp();
        let a = advs[i];
        let kl = kl_from_logprobs(lp, lq);
        loss -= c * (clipped_surrogate(rho, a, eps) - beta * kl);
        let gs = clipped_surrogate_grad(rho, a, eps);
        stats.mean_ratio += rho;
        stats.max_abs_log_ratio = stats.max_abs_log_ratio.max((lp[y] - step.logprob_old).abs());
        stats.mean_kl += kl;
        stats.clip_fraction += in_dead_zone(rho, a, eps) as u8 as f64;
        for j in 0..v {
            let p = lp[j].exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            let dkl = if p > 0.0 { p * (lp[j] - lq[j] - kl) } else { 0.0 };
            up.push(c * (-gs * rho * (onehot - p) + beta * dkl));
        }
    }
    let n = rows.len() as f64;
    stats.mean_ratio /= n;
    stats.mean_kl /= n;
    stats.clip_fraction /= n;
    let mut grads = policy.zeros_like();
    policy.backprop(&pt, &up, &mut grads)?;
    Ok((loss, grads, stats))
}

/// One outer step: refresh `theta_old`, collect groups, `inner_epochs` Adam
/// updates. On a non-finite loss the groups are dumped to `diagnostics`.
pub fn stage1_step(
    state: &mut Stage1State,
    generator: &FlowModel,
    models: &RewardModels<'_>,
    world: &WorldSpec,
    cfg: &GrpoConfig,
    rng: &Rng,
    diagnostics: Option<&Path>,
) -> Result<(StepMetrics, Vec<Stage1Group>)> {
    let step_rng = rng.child(state.step as u64);
    let old = PolicySnapshot::of(SnapshotRole::Old, &state.policy);
    let groups = collect_stage1_groups(&old.params, generator, models, world, cfg, &step_rng)?;
    let mut last = (0.0, LossStats::default());
    for _ in 0..cfg.inner_epochs {
        let (loss, grads, stats) = stage1_loss_and_grad(&state.policy, &state.reference.params, &groups, cfg)?;
        if !loss.is_finite() {
            let msg = format!("stage-1 loss at step {}", state.step);
            return Err(non_finite(msg, diagnostics, state.step, &groups));
        }
        state.optimizer.step(&mut state.policy, &grads)?;
        last = (loss, stats);
    }
    let rewards: Vec<&[RewardVector<f64>]> = groups.iter().map(|g| g.rewards.as_slice()).collect();
    let metrics = StepMetrics {
        stage: 1,
        step: state.step,
        mean_reward: mean_reward(&rewards),
        mean_advantage_abs: mean_abs(groups.iter().flat_map(|g| g.advantages.iter().copied())),
        clip_fraction: last.1.clip_fraction,
        mean_kl: last.1.mean_kl,
        mean_ratio: last.1.mean_ratio,
        loss: last.0,
        wallclock_ms: None,
    };
    state.step += 1;
    Ok((metrics, groups))
}

pub(super) fn non_finite<G: Serialize>(msg: String, dir: Option<&Path>, step: usize, groups: &G) -> Error {
    match dir {
        Some(d) => match dump_json(d, &format!("nonfinite_step{step}.json"), groups) {
            Ok(p) => Error::NonFinite(format!("{msg}; group dump at {}", p.display())),
            Err(e) => Error::NonFinite(format!("{msg}; group dump failed: {e}")),
        },
        None => Error::NonFinite(msg),
    }
}

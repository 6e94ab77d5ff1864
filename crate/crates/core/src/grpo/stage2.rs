use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::stage1::non_finite;
use super::{
    clipped_surrogate, clipped_surrogate_grad, in_dead_zone, mean_abs, mean_reward, GrpoConfig, LossStats,
    PolicySnapshot, SnapshotRole, StepMetrics,
};
use crate::flowgen::{gaussian_logdensity, sample_sde_window_with, FlowModel, SdeOptions, TrajectoryRecord, VelocityField, WindowStep};
use crate::numkit::{Adam, AdamConfig, Params, Rng};
use crate::promptpolicy::{rollout, PromptPolicy};
use crate::rewardcore::{fuse_scoped, score_batch, RewardModels, RewardVector};
use crate::synthworld::{user_prompt, PromptSeq, WorldSpec};
use crate::{Adam64, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage2Group {
    pub user_class: usize,
    pub prompt: PromptSeq,
    pub rewritten: bool,
    pub window_start: usize,
    pub trajectories: Vec<TrajectoryRecord>,
    pub rewards: Vec<RewardVector<f64>>,
    pub advantages: Vec<f64>,
}

pub struct Stage2State {
    pub generator: FlowModel,
    pub reference: PolicySnapshot<FlowModel>,
    pub optimizer: Adam64,
    pub step: usize,
}

impl Stage2State {
    /// Rejects `eta = 0` (ratios undefined) before any work is done.
    pub fn new(generator: FlowModel, cfg: &GrpoConfig) -> Result<Self> {
        cfg.validate()?;
        if generator.eta() <= 0.0 {
            return Err(Error::Config(
                "stage 2 needs eta > 0: with eta = 0 transition ratios are undefined".into(),
            ));
        }
        if cfg.window_len >= generator.num_steps() {
            return Err(Error::Config(format!(
                "window_len {} must be smaller than T_steps {}",
                cfg.window_len,
                generator.num_steps()
            )));
        }
        Ok(Stage2State {
            reference: PolicySnapshot::of(SnapshotRole::Reference, &generator),
            generator,
            optimizer: Adam::new(AdamConfig::with_lr(cfg.lr)),
            step: 0,
        })
    }
}

/// Closed-form `KL` between the two window transitions (shared sigma).
pub fn kl_step(model: &FlowModel, reference: &FlowModel, step: &WindowStep, cond: &PromptSeq) -> Result<f64> {
    if step.sigma <= 0.0 {
        return Err(Error::InvalidArgument("KL undefined for sigma = 0".into()));
    }
    let a = model.velocity(&step.x_t, &[step.t], &[cond])?;
    let b = reference.velocity(&step.x_t, &[step.t], &[cond])?;
    let dt = model.dt();
    let sq: f64 = a
        .iter()
        .zip(&b)
        .zip(&step.x_t)
        .map(|((va, vb), x)| {
            let d = (x - dt * va) - (x - dt * vb);
            d * d
        })
        .sum();
    Ok(sq / (2.0 * step.sigma * step.sigma))
}

pub fn collect_stage2_groups(
    old: &FlowModel,
    policy: &PromptPolicy,
    models: &RewardModels<'_>,
    world: &WorldSpec,
    cfg: &GrpoConfig,
    rng: &Rng,
) -> Result<Vec<Stage2Group>> {
    let t_steps = old.num_steps();
    if cfg.window_len >= t_steps {
        return Err(Error::Config("window does not fit".into()));
    }
    let opts = SdeOptions {
        fresh_noise_per_branch: cfg.fresh_noise_per_branch,
    };
    let mut groups = (0..cfg.groups_per_step)
        .into_par_iter()
        .map(|g| {
            let grng = rng.child(g as u64);
            let k = grng.child_named("class").below(world.num_classes);
            let user = user_prompt(world, k)?;
            let rewritten = grng.child_named("route").bernoulli(cfg.rewrite_fraction);
            let prompt = if rewritten {
                rollout(policy, &user, 1, &grng.child_named("rewrite"))?.remove(0).output
            } else {
                user
            };
            let window_start = cfg.window_len + grng.child_named("window").below(t_steps - cfg.window_len);
            let trajectories = sample_sde_window_with(
                old,
                &prompt,
                window_start,
                cfg.window_len,
                cfg.group_size,
                opts,
                &mut grng.child_named("sde"),
            )?;
            let samples: Vec<_> = trajectories.iter().map(|t| t.final_sample.clone()).collect();
            let rewards = score_batch(&samples, &vec![k; samples.len()], models)?;
            Ok(Stage2Group {
                user_class: k,
                prompt,
                rewritten,
                window_start,
                trajectories,
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

/// Negated clipped objective over window steps with Gaussian step ratios and
/// closed-form KL, averaged over groups, trajectories and the window length.
pub fn stage2_loss_and_grad(
    generator: &FlowModel,
    reference: &FlowModel,
    groups: &[Stage2Group],
    cfg: &GrpoConfig,
) -> Result<(f64, FlowModel, LossStats)> {
    let mut rows: Vec<(&WindowStep, &PromptSeq, f64)> = Vec::new();
    let mut n_traj = 0usize;
    for g in groups {
        if g.advantages.len() != g.trajectories.len() {
            return Err(Error::Shape("one advantage per trajectory".into()));
        }
        for (t, a) in g.trajectories.iter().zip(&g.advantages) {
            n_traj += 1;
            for w in &t.window {
                rows.push((w, &t.condition, *a));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no window steps".into()));
    }
    let d = generator.world.dim;
    let xs: Vec<f64> = rows.iter().flat_map(|(w, _, _)| w.x_t.iter().copied()).collect();
    let ts: Vec<f64> = rows.iter().map(|(w, _, _)| w.t).collect();
    let conds: Vec<&PromptSeq> = rows.iter().map(|(_, c, _)| *c).collect();
    let vt = generator.velocity_trace(&xs, &ts, &conds)?;
    let v_ref = reference.velocity(&xs, &ts, &conds)?;
    let dt = generator.dt();
    let n_groups = groups.len() as f64;
    let group_size = n_traj as f64 / n_groups;
    let c = 1.0 / (n_groups * group_size * cfg.window_len as f64);
    let (eps, beta) = (cfg.clip_eps, cfg.kl_beta);

    let mut loss = 0.0;
    let mut stats = LossStats::default();
    let mut up = Vec::with_capacity(xs.len());
    for (r, (w, _, a)) in rows.iter().enumerate() {
        let old = w.logdens_old.ok_or_else(|| {
            Error::InvalidArgument("window step without a log-density (sigma = 0)".into())
        })?;
        let v = &vt.velocities()[r * d..(r + 1) * d];
        let vr = &v_ref[r * d..(r + 1) * d];
        let mean: Vec<f64> = w.x_t.iter().zip(v).map(|(x, vi)| x - dt * vi).collect();
        let mean_ref: Vec<f64> = w.x_t.iter().zip(vr).map(|(x, vi)| x - dt * vi).collect();
        let var = w.sigma * w.sigma;
        let lp = gaussian_logdensity(&w.x_next, &mean, w.sigma);
        let rho = (lp - old).exp();
        let kl: f64 = mean
            .iter()
            .zip(&mean_ref)
            .map(|(m, q)| (m - q) * (m - q))
            .sum::<f64>()
            / (2.0 * var);
        loss -= c * (clipped_surrogate(rho, *a, eps) - beta * kl);
        let gs = clipped_surrogate_grad(rho, *a, eps);
        stats.mean_ratio += rho;
        stats.max_abs_log_ratio = stats.max_abs_log_ratio.max((lp - old).abs());
        stats.mean_kl += kl;
        stats.clip_fraction += in_dead_zone(rho, *a, eps) as u8 as f64;
        for k in 0..d {
            let dmean = -c * (gs * rho * (w.x_next[k] - mean[k]) / var - beta * (mean[k] - mean_ref[k]) / var);
            up.push(-dt * dmean);
        }
    }
    let n = rows.len() as f64;
    stats.mean_ratio /= n;
    stats.mean_kl /= n;
    stats.clip_fraction /= n;
    let mut grads = generator.zeros_like();
    generator.backprop_velocity(&vt, &up, &mut grads)?;
    Ok((loss, grads, stats))
}

pub fn stage2_step(
    state: &mut Stage2State,
    policy: &PromptPolicy,
    models: &RewardModels<'_>,
    world: &WorldSpec,
    cfg: &GrpoConfig,
    rng: &Rng,
    diagnostics: Option<&Path>,
) -> Result<(StepMetrics, Vec<Stage2Group>)> {
    let step_rng = rng.child(state.step as u64);
    let old = PolicySnapshot::of(SnapshotRole::Old, &state.generator);
    let groups = collect_stage2_groups(&old.params, policy, models, world, cfg, &step_rng)?;
    let mut last = (0.0, LossStats::default());
    for _ in 0..cfg.inner_epochs {
        let (loss, grads, stats) = stage2_loss_and_grad(&state.generator, &state.reference.params, &groups, cfg)?;
        if !loss.is_finite() {
            let msg = format!("stage-2 loss at step {}", state.step);
            return Err(non_finite(msg, diagnostics, state.step, &groups));
        }
        state.optimizer.step(&mut state.generator, &grads)?;
        last = (loss, stats);
    }
    let rewards: Vec<&[RewardVector<f64>]> = groups.iter().map(|g| g.rewards.as_slice()).collect();
    let metrics = StepMetrics {
        stage: 2,
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

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{PhaseRecord, RunDir};
use crate::detectors::{self, auc, DetectorSuite};
use crate::flowgen::{fm_pretrain, sample_ode_batch, FlowModel};
use crate::grpo::{stage1_step, stage2_step, RewardTrace, Stage1State, Stage2State, StepMetrics};
use crate::numkit::Rng;
use crate::promptpolicy::{rollout, sft_policy, template_corpus, write_prompt_dumps, PromptPolicy};
use crate::synthworld::{sample_real, user_prompt, PromptSeq, Sample, WorldSpec};
use crate::{Error, Result};

pub const PRETRAIN: &str = "pretrain-generator";
pub const DETECTORS: &str = "train-detectors";
pub const SFT: &str = "sft-policy";
pub const STAGE1: &str = "grpo-stage1";
pub const STAGE2: &str = "grpo-stage2";

/// Root of a named random stream derived from the run seed.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::named(seed, name)
}

/// ODE samples for `prompts`; item `i` uses noise stream `rng.child(i)`.
pub fn generate(model: &FlowModel, prompts: &[PromptSeq], rng: &Rng) -> Result<Vec<Sample>> {
    const CHUNK: usize = 256;
    let chunks: Vec<Vec<Sample>> = prompts
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, ps)| {
            let mut rngs: Vec<Rng> = (0..ps.len()).map(|i| rng.child((c * CHUNK + i) as u64)).collect();
            sample_ode_batch(model, ps, &mut rngs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Item `i` is enriched by `policy` with probability `fraction` (decided on
/// `rng.child(i)`), otherwise passed through.
pub fn route_prompts(
    world: &WorldSpec,
    policy: Option<&PromptPolicy>,
    classes: &[usize],
    fraction: f64,
    rng: &Rng,
) -> Result<Vec<PromptSeq>> {
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let user = user_prompt(world, k)?;
            let r = rng.child(i as u64);
            match policy {
                Some(p) if r.child_named("route").bernoulli(fraction) => {
                    Ok(rollout(p, &user, 1, &r.child_named("rewrite"))?.remove(0).output)
                }
                _ => Ok(user),
            }
        })
        .collect()
}

/// Prompts for detector data: bare class prompts, with a `caption_fraction`
/// share of full captions.
fn detector_prompts(world: &WorldSpec, n: usize, caption_fraction: f64, rng: &mut Rng) -> Result<Vec<PromptSeq>> {
    (0..n)
        .map(|_| {
            let k = rng.below(world.num_classes);
            if !rng.bernoulli(caption_fraction) {
                user_prompt(world, k)
            } else {
                let m = rng.below(world.sub_modes);
                let s = rng.below(world.style_tokens);
                world.caption(k, m, s)
            }
        })
        .collect()
}

fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

pub fn pretrain_generator(run: &mut RunDir) -> Result<()> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let world_rng = stream(cfg.seed, "world");
    let real = sample_real(&cfg.world, cfg.data.pretrain_real, &mut world_rng.child_named("pretrain-data"))?;
    let rng = stream(cfg.seed, "pretrain");
    let mut model = FlowModel::new(&cfg.world, &cfg.generator, &mut rng.child_named("init"))?;
    let curve = fm_pretrain(&mut model, &real, &cfg.pretrain, &mut rng.child_named("train"))?;
    let mut rec = PhaseRecord::default();
    rec.files.insert("generator".into(), run.write_json("checkpoints/generator_pretrained.json", &model)?);
    rec.files.insert("loss_curve".into(), run.write("metrics/pretrain_loss.csv", loss_csv(&curve).as_bytes())?);
    rec.wallclock_ms = elapsed_ms(t0);
    run.record_phase(PRETRAIN, rec)
}

/// Cold-start diagnostics written next to the detector checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub alignment_accuracy_real: f64,
    pub generated_class_accuracy: f64,
    pub heldout_auc: f64,
    pub semantic_auc: f64,
    pub feature_auc: f64,
    pub real_samples: usize,
    pub generated_samples: usize,
}

pub fn evaluate_detectors(suite: &DetectorSuite, real: &[Sample], generated: &[Sample]) -> DetectorEval {
    let acc = |s: &[Sample]| {
        s.iter().filter(|x| suite.alignment.predict(&x.x) == x.class()).count() as f64 / s.len() as f64
    };
    let heldout = |s: &[Sample]| -> Vec<f64> { s.iter().map(|x| suite.heldout.real_probability(&x.x)).collect() };
    let feature = |s: &[Sample]| -> Vec<f64> { s.iter().map(|x| suite.feature.real_probability(&x.x)).collect() };
    let semantic = |s: &[Sample]| -> Vec<f64> {
        s.iter().map(|x| detectors::real_probability(suite.semantic.logits(&x.x))).collect()
    };
    DetectorEval {
        alignment_accuracy_real: acc(real),
        generated_class_accuracy: acc(generated),
        heldout_auc: auc(&heldout(real), &heldout(generated)),
        semantic_auc: auc(&semantic(real), &semantic(generated)),
        feature_auc: auc(&feature(real), &feature(generated)),
        real_samples: real.len(),
        generated_samples: generated.len(),
    }
}

/// With `explain`, also writes the semantic detector's per-statistic
/// contributions at the mean generated point.
pub fn train_detectors(run: &mut RunDir, explain: bool) -> Result<DetectorEval> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let generator: FlowModel = run.load_json(PRETRAIN, "generator")?;
    let world_rng = stream(cfg.seed, "world");
    let rng = stream(cfg.seed, "detectors");
    let real = sample_real(&cfg.world, cfg.data.detector_real, &mut world_rng.child_named("detector-data"))?;
    let prompts = detector_prompts(&cfg.world, cfg.data.detector_generated, cfg.data.detector_caption_fraction, &mut rng.child_named("prompts"))?;
    let generated = generate(&generator, &prompts, &rng.child_named("generate"))?;
    let suite = detectors::train_detectors(&cfg.world, &real, &generated, &cfg.detectors, &rng.child_named("train"))?;

    let eval_real = sample_real(&cfg.world, cfg.data.eval_real, &mut world_rng.child_named("eval-data"))?;
    let eval_prompts = detector_prompts(&cfg.world, cfg.data.eval_generated, cfg.data.detector_caption_fraction, &mut rng.child_named("eval-prompts"))?;
    let eval_generated = generate(&generator, &eval_prompts, &rng.child_named("eval-generate"))?;
    let eval = evaluate_detectors(&suite, &eval_real, &eval_generated);

    let mut rec = PhaseRecord::default();
    rec.files.insert("detectors".into(), run.write_json("checkpoints/detectors.json", &suite)?);
    rec.files.insert("eval".into(), run.write("detectors/eval.json", &serde_json::to_vec_pretty(&eval)?)?);
    if explain {
        let report = detectors::semantic_report(&suite.semantic, &mean_point(&eval_generated));
        rec.files.insert(
            "semantic_report".into(),
            run.write("detectors/semantic_report.csv", detectors::report_csv(&report).as_bytes())?,
        );
    }
    rec.wallclock_ms = elapsed_ms(t0);
    run.record_phase(DETECTORS, rec)?;
    Ok(eval)
}

fn mean_point(s: &[Sample]) -> Vec<f64> {
    let d = s[0].x.len();
    let mut m = vec![0.0; d];
    for x in s {
        for (a, v) in m.iter_mut().zip(&x.x) {
            *a += v / s.len() as f64;
        }
    }
    m
}

pub fn sft(run: &mut RunDir) -> Result<()> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let rng = stream(cfg.seed, "sft");
    let mut policy = PromptPolicy::for_world(&cfg.world, &cfg.policy, &mut rng.child_named("init"))?;
    let corpus = template_corpus(&cfg.world, cfg.data.sft_corpus, &mut rng.child_named("corpus"))?;
    let curve = sft_policy(&mut policy, &corpus, &cfg.sft, &mut rng.child_named("train"))?;
    let mut rec = PhaseRecord::default();
    rec.files.insert("policy".into(), run.write_json("checkpoints/policy_sft.json", &policy)?);
    rec.files.insert("loss_curve".into(), run.write("metrics/sft_loss.csv", loss_csv(&curve).as_bytes())?);
    rec.wallclock_ms = elapsed_ms(t0);
    run.record_phase(SFT, rec)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn diagnostics_dir(run: &RunDir) -> PathBuf {
    run.path("diagnostics")
}

pub fn grpo_stage1(run: &mut RunDir) -> Result<Vec<StepMetrics>> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let gcfg = cfg.stage1.clone();
    gcfg.validate()?;
    let generator: FlowModel = run.load_json(PRETRAIN, "generator")?;
    let suite: DetectorSuite = run.load_json(DETECTORS, "detectors")?;
    let policy: PromptPolicy = run.load_json(SFT, "policy")?;
    let models = suite.reward_models();
    let rng = stream(cfg.seed, "stage1").child(gcfg.seed);
    let diag = diagnostics_dir(run);
    let mut state = Stage1State::new(policy, &gcfg)?;
    let mut metrics = Vec::with_capacity(gcfg.steps);
    let mut traces = Vec::new();
    let mut last_groups = Vec::new();
    for _ in 0..gcfg.steps {
        let ts = Instant::now();
        let (mut m, groups) = stage1_step(&mut state, &generator, &models, &cfg.world, &gcfg, &rng, Some(&diag))?;
        if cfg.record_wallclock {
            m.wallclock_ms = Some(elapsed_ms(ts));
        }
        for (g, grp) in groups.iter().enumerate() {
            traces.push(RewardTrace {
                stage: 1,
                step: m.step,
                group: g,
                user_class: grp.user.user_class(),
                rewards: grp.rewards.clone(),
                advantages: grp.advantages.clone(),
            });
        }
        metrics.push(m);
        last_groups = groups;
    }
    let mut rec = PhaseRecord::default();
    rec.files.insert("policy".into(), run.write_json("checkpoints/policy_stage1.json", &state.policy)?);
    rec.files.insert("metrics".into(), run.write("metrics/stage1.jsonl", &jsonl(&metrics)?)?);
    rec.files.insert("reward_traces".into(), run.write("metrics/reward_traces_stage1.jsonl", &jsonl(&traces)?)?);
    if cfg.dump_trajectories {
        let trajs: Vec<_> = last_groups.iter().flat_map(|g| g.trajectories.clone()).collect();
        let mut buf = Vec::new();
        write_prompt_dumps(&mut buf, &trajs)?;
        rec.files.insert("prompt_dump".into(), run.write("debug/stage1_prompts.jsonl", &buf)?);
    }
    rec.wallclock_ms = elapsed_ms(t0);
    run.record_phase(STAGE1, rec)?;
    Ok(metrics)
}

/// The policy that routes prompts after stage 1 (falls back to SFT).
pub fn routing_policy(run: &RunDir) -> Result<Option<PromptPolicy>> {
    if run.has(STAGE1, "policy") {
        Ok(Some(run.load_json(STAGE1, "policy")?))
    } else if run.has(SFT, "policy") {
        Ok(Some(run.load_json(SFT, "policy")?))
    } else {
        Ok(None)
    }
}

pub fn grpo_stage2(run: &mut RunDir) -> Result<Vec<StepMetrics>> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    cfg.validate_stage2()?;
    let gcfg = cfg.stage2.clone();
    let generator: FlowModel = run.load_json(PRETRAIN, "generator")?;
    let suite: DetectorSuite = run.load_json(DETECTORS, "detectors")?;
    let policy = routing_policy(run)?.ok_or_else(|| {
        Error::Config("stage 2 routes prompts through a policy: run sft-policy first".into())
    })?;
    let models = suite.reward_models();
    let rng = stream(cfg.seed, "stage2").child(gcfg.seed);
    let diag = diagnostics_dir(run);
    let mut state = Stage2State::new(generator, &gcfg)?;
    let mut metrics = Vec::with_capacity(gcfg.steps);
    let mut traces = Vec::new();
    let mut last_groups = Vec::new();
    for _ in 0..gcfg.steps {
        let ts = Instant::now();
        let (mut m, groups) = stage2_step(&mut state, &policy, &models, &cfg.world, &gcfg, &rng, Some(&diag))?;
        if cfg.record_wallclock {
            m.wallclock_ms = Some(elapsed_ms(ts));
        }
        for (g, grp) in groups.iter().enumerate() {
            traces.push(RewardTrace {
                stage: 2,
                step: m.step,
                group: g,
                user_class: grp.user_class,
                rewards: grp.rewards.clone(),
                advantages: grp.advantages.clone(),
            });
        }
        metrics.push(m);
        last_groups = groups;
    }
    let mut rec = PhaseRecord::default();
    rec.files.insert("generator".into(), run.write_json("checkpoints/generator_stage2.json", &state.generator)?);
    rec.files.insert("metrics".into(), run.write("metrics/stage2.jsonl", &jsonl(&metrics)?)?);
    rec.files.insert("reward_traces".into(), run.write("metrics/reward_traces_stage2.jsonl", &jsonl(&traces)?)?);
    if cfg.dump_trajectories {
        let steps: Vec<_> = last_groups
            .iter()
            .flat_map(|g| g.trajectories.iter().flat_map(|t| t.window.clone()))
            .collect();
        rec.files.insert("trajectory_dump".into(), run.write("debug/stage2_window_steps.jsonl", &jsonl(&steps)?)?);
    }
    rec.wallclock_ms = elapsed_ms(t0);
    run.record_phase(STAGE2, rec)?;
    Ok(metrics)
}

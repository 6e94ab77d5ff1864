use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::phases::{generate, route_prompts, routing_policy, stream, DETECTORS, PRETRAIN, SFT, STAGE1, STAGE2};
use super::run::{PhaseRecord, RunDir};
use crate::detectors::{alignment_reward, DetectorSuite};
use crate::flowgen::FlowModel;
use crate::numkit::Rng;
use crate::promptpolicy::PromptPolicy;
use crate::realbench::{
    detector_scoring, leaderboard_csv, run_arena, vs_real_winrate, write_battle_log, DetectorScores, Entry, EntryKind,
    HeldoutJudge, WinRate,
};
use crate::synthworld::{read_samples_jsonl, sample_real, write_samples_jsonl, Sample, WorldSpec};
use crate::{Error, Result};

pub const SCORE: &str = "score";
pub const ARENA: &str = "arena";

pub const REAL_ID: &str = "real";
pub const BASELINE_ID: &str = "baseline";
pub const STAGE1_ID: &str = "stage1";
pub const STAGE2_ID: &str = "stage2";

/// Exactly `n_per_class` real points per class, class-major order.
pub fn balanced_real(world: &WorldSpec, n_per_class: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    let k = world.num_classes;
    let mut pools: Vec<Vec<Sample>> = vec![Vec::new(); k];
    while pools.iter().any(|p| p.len() < n_per_class) {
        for s in sample_real(world, n_per_class * k, rng)? {
            let c = s.class();
            if pools[c].len() < n_per_class {
                pools[c].push(s);
            }
        }
    }
    Ok(pools.into_iter().flatten().collect())
}

/// Class-major prompt classes: `n` of class 0, then `n` of class 1, ...
pub fn bench_classes(world: &WorldSpec, n_per_class: usize) -> Vec<usize> {
    (0..world.num_classes).flat_map(|k| std::iter::repeat_n(k, n_per_class)).collect()
}

/// Generated bench samples. Prompt routing and noise streams are shared by
/// every entry, so entries differ only in their checkpoints.
pub fn bench_samples(
    world: &WorldSpec,
    generator: &FlowModel,
    policy: Option<&PromptPolicy>,
    rewrite_fraction: f64,
    n_per_class: usize,
    rng: &Rng,
) -> Result<Vec<Sample>> {
    let classes = bench_classes(world, n_per_class);
    let prompts = route_prompts(world, policy, &classes, rewrite_fraction, &rng.child_named("prompts"))?;
    generate(generator, &prompts, &rng.child_named("noise"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryScores {
    #[serde(flatten)]
    pub detectors: DetectorScores,
    /// Mean probability of the prompted class; absent for the real entry.
    pub alignment: Option<f64>,
    /// The held-out detector never feeds a reward.
    pub heldout_reward_independent: bool,
}

pub fn mean_alignment(suite: &DetectorSuite, samples: &[Sample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += alignment_reward(&suite.alignment, s, s.class())?;
    }
    Ok(acc / samples.len() as f64)
}

fn samples_file(id: &str) -> String {
    format!("bench/samples_{id}.jsonl")
}

/// Draws every entry's samples and scores them with all detectors.
pub fn score(run: &mut RunDir) -> Result<Vec<EntryScores>> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let suite: DetectorSuite = run.load_json(DETECTORS, "detectors")?;
    let base: FlowModel = run.load_json(PRETRAIN, "generator")?;
    let sft: Option<PromptPolicy> = if run.has(SFT, "policy") { Some(run.load_json(SFT, "policy")?) } else { None };
    let routed = routing_policy(run)?;
    let n = cfg.bench.n_per_class;
    let frac = cfg.stage2.rewrite_fraction;
    let rng = stream(cfg.seed, "arena");

    let mut entries: Vec<(String, EntryKind, Vec<Sample>)> = Vec::new();
    let real = balanced_real(&cfg.world, n, &mut stream(cfg.seed, "world").child_named("bench-data"))?;
    entries.push((REAL_ID.into(), EntryKind::Real, real));
    let pretrained_ref = run.manifest.file(PRETRAIN, "generator").map(|f| f.path.clone()).unwrap_or_default();
    let xs = bench_samples(&cfg.world, &base, sft.as_ref(), frac, n, &rng)?;
    entries.push((BASELINE_ID.into(), EntryKind::Model { checkpoint: pretrained_ref.clone() }, xs));
    if run.has(STAGE1, "policy") {
        let xs = bench_samples(&cfg.world, &base, routed.as_ref(), frac, n, &rng)?;
        entries.push((STAGE1_ID.into(), EntryKind::Model { checkpoint: pretrained_ref }, xs));
    }
    if run.has(STAGE2, "generator") {
        let g: FlowModel = run.load_json(STAGE2, "generator")?;
        let path = run.manifest.file(STAGE2, "generator").map(|f| f.path.clone()).unwrap_or_default();
        let xs = bench_samples(&cfg.world, &g, routed.as_ref(), frac, n, &rng)?;
        entries.push((STAGE2_ID.into(), EntryKind::Model { checkpoint: path }, xs));
    }

    let mut rec = PhaseRecord::default();
    let mut scores = Vec::with_capacity(entries.len());
    let mut kinds = Vec::new();
    for (id, kind, samples) in &entries {
        let entry = Entry::from_samples(id.clone(), kind.clone(), samples, cfg.world.num_classes)?;
        let det = detector_scoring(&entry, &suite, n)?;
        let alignment = if entry.is_real() { None } else { Some(mean_alignment(&suite, samples)?) };
        scores.push(EntryScores {
            detectors: det,
            alignment,
            heldout_reward_independent: true,
        });
        let mut buf = Vec::new();
        write_samples_jsonl(&mut buf, samples)?;
        rec.files.insert(format!("samples_{id}"), run.write(&samples_file(id), &buf)?);
        kinds.push((id.clone(), kind.clone()));
    }
    rec.files.insert("entries".into(), run.write_json("bench/entries.json", &kinds)?);
    rec.files.insert("scores".into(), run.write("bench/scores.json", &serde_json::to_vec_pretty(&scores)?)?);
    rec.files.insert("scores_csv".into(), run.write("bench/scores.csv", scores_csv(&scores).as_bytes())?);
    rec.wallclock_ms = t0.elapsed().as_millis() as u64;
    run.record_phase(SCORE, rec)?;
    Ok(scores)
}

pub fn scores_csv(scores: &[EntryScores]) -> String {
    let mut out = String::from("entry,semantic,feature,heldout,alignment,samples\n");
    for s in scores {
        let d = &s.detectors;
        let a = s.alignment.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{a},{}\n", d.entry, d.semantic, d.feature, d.heldout, d.samples));
    }
    out
}

/// Reloads the entries written by [`score`].
pub fn load_entries(run: &RunDir) -> Result<Vec<Entry>> {
    let k = run.config.world.num_classes;
    let kinds: Vec<(String, EntryKind)> = run.load_json(SCORE, "entries")?;
    kinds
        .into_iter()
        .map(|(id, kind)| {
            let bytes = run.read_verified(SCORE, &format!("samples_{id}"))?;
            let samples = read_samples_jsonl(bytes.as_slice())?;
            Entry::from_samples(id, kind, &samples, k)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub entry: String,
    pub heldout: f64,
    pub semantic: f64,
    pub feature: f64,
    pub alignment: Option<f64>,
    pub overall: Option<WinRate>,
    pub vs_real: Option<WinRate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub world: WorldSpec,
    pub battles: usize,
    pub judge_errors: usize,
    pub rows: Vec<SummaryRow>,
}

impl BenchSummary {
    pub fn row(&self, id: &str) -> Result<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.entry == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no entry `{id}` in the summary")))
    }
}

/// Runs the arena over the scored entries with the held-out judge.
pub fn arena(run: &mut RunDir) -> Result<BenchSummary> {
    let t0 = Instant::now();
    let cfg = run.config.clone();
    let suite: DetectorSuite = run.load_json(DETECTORS, "detectors")?;
    let scores: Vec<EntryScores> = run.load_json(SCORE, "scores")?;
    let entries = load_entries(run)?;
    let judge = HeldoutJudge(&suite.heldout);
    let result = run_arena(&entries, &judge, cfg.bench.schedule(), &stream(cfg.seed, "arena").child_named("battles"))?;
    let m = &result.matrix;

    let det: Vec<DetectorScores> = scores.iter().map(|s| s.detectors.clone()).collect();
    let rows = scores
        .iter()
        .map(|s| {
            let i = m.index_of(&s.detectors.entry)?;
            let vs_real = match m.real_index {
                Some(r) if r != i => vs_real_winrate(m, &s.detectors.entry).ok(),
                _ => None,
            };
            Ok(SummaryRow {
                entry: s.detectors.entry.clone(),
                heldout: s.detectors.heldout,
                semantic: s.detectors.semantic,
                feature: s.detectors.feature,
                alignment: s.alignment,
                overall: m.overall(i),
                vs_real,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = BenchSummary {
        world: cfg.world.clone(),
        battles: result.battles.len(),
        judge_errors: result.judge_errors,
        rows,
    };

    let mut rec = PhaseRecord::default();
    let mut log = Vec::new();
    write_battle_log(&mut log, &result.battles)?;
    rec.files.insert("battles".into(), run.write("bench/battles.jsonl", &log)?);
    rec.files.insert("matrix_csv".into(), run.write("bench/arena_matrix.csv", m.to_csv().as_bytes())?);
    rec.files.insert(
        "matrix".into(),
        run.write("bench/arena_matrix.json", &serde_json::to_vec_pretty(&m.to_json())?)?,
    );
    rec.files.insert("leaderboard".into(), run.write("bench/leaderboard.csv", leaderboard_csv(m, &det)?.as_bytes())?);
    rec.files.insert("summary".into(), run.write("bench/summary.json", &serde_json::to_vec_pretty(&summary)?)?);
    rec.wallclock_ms = t0.elapsed().as_millis() as u64;
    run.record_phase(ARENA, rec)?;
    Ok(summary)
}

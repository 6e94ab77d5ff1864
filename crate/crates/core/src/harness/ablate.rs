use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bench::{self, BenchSummary, BASELINE_ID, STAGE1_ID, STAGE2_ID};
use super::config::ExperimentConfig;
use super::phases::{self, DETECTORS, PRETRAIN, SFT, STAGE1};
use super::report::report;
use super::run::RunDir;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Stage 2 with the full reward, alignment only, and feature only.
    RewardSwap,
    /// SFT only, stage 1 only, stage 2 only, and both stages.
    StageWise,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward-swap" => Ok(Preset::RewardSwap),
            "stage-wise" => Ok(Preset::StageWise),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset `{s}` (expected reward-swap or stage-wise)"
            ))),
        }
    }
}

/// One arm of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub use_stage1: bool,
    pub run_stage2: bool,
    pub stage2_weights: [f64; 3],
}

impl Preset {
    pub fn variants(self) -> Vec<Variant> {
        let v = |name, use_stage1, run_stage2, w| Variant {
            name,
            use_stage1,
            run_stage2,
            stage2_weights: w,
        };
        match self {
            Preset::RewardSwap => vec![
                v("full", true, true, [1.0, 1.0, 1.0]),
                v("alignment-only", true, true, [0.0, 0.0, 1.0]),
                v("feature-only", true, true, [0.0, 1.0, 0.0]),
            ],
            Preset::StageWise => vec![
                v("sft-only", false, false, [1.0, 1.0, 1.0]),
                v("stage1-only", true, false, [1.0, 1.0, 1.0]),
                v("stage2-only", false, true, [1.0, 1.0, 1.0]),
                v("full", true, true, [1.0, 1.0, 1.0]),
            ],
        }
    }

    fn needs_stage1(self) -> bool {
        self.variants().iter().any(|v| v.use_stage1)
    }
}

/// Seeds used when none are given: three consecutive seeds from the config's.
pub fn default_seeds(base: u64) -> Vec<u64> {
    (0..3).map(|i| base + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: String,
    /// The entry compared against the baseline.
    pub entry: String,
    pub baseline_heldout: f64,
    pub heldout: f64,
    pub heldout_gain: f64,
    pub baseline_alignment: Option<f64>,
    pub alignment: Option<f64>,
    pub vs_real: Option<f64>,
    pub baseline_vs_real: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Mean held-out gain of `variant` over seeds.
    pub fn mean_gain(&self, variant: &str) -> Option<f64> {
        let g: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.heldout_gain).collect();
        (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
    }

    pub fn gain(&self, seed: u64, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.variant == variant).map(|r| r.heldout_gain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,variant,entry,baseline_heldout,heldout,heldout_gain,baseline_alignment,alignment,baseline_vs_real,vs_real\n",
        );
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.variant,
                r.entry,
                r.baseline_heldout,
                r.heldout,
                r.heldout_gain,
                o(r.baseline_alignment),
                o(r.alignment),
                o(r.baseline_vs_real),
                o(r.vs_real)
            );
        }
        out
    }
}

fn copy_phase(from: &RunDir, to: &mut RunDir, phase: &str) -> Result<()> {
    let rec = from
        .manifest
        .phases
        .get(phase)
        .cloned()
        .ok_or_else(|| Error::Config(format!("{}: phase `{phase}` missing", from.dir.display())))?;
    for f in rec.files.values() {
        let src = from.path(&f.path);
        let dst = to.path(&f.path);
        if let Some(p) = dst.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    }
    to.record_phase(phase, rec)
}

fn summary_row(seed: u64, variant: &str, s: &BenchSummary) -> Result<AblationRow> {
    let base = s.row(BASELINE_ID)?;
    let top = [STAGE2_ID, STAGE1_ID, BASELINE_ID]
        .into_iter()
        .find_map(|id| s.row(id).ok())
        .unwrap_or(base);
    Ok(AblationRow {
        seed,
        variant: variant.to_string(),
        entry: top.entry.clone(),
        baseline_heldout: base.heldout,
        heldout: top.heldout,
        heldout_gain: top.heldout - base.heldout,
        baseline_alignment: base.alignment,
        alignment: top.alignment,
        vs_real: top.vs_real.map(|w| w.rate),
        baseline_vs_real: base.vs_real.map(|w| w.rate),
    })
}

/// Shared upstream phases for one seed.
pub fn run_upstream(dir: &Path, cfg: &ExperimentConfig, with_stage1: bool) -> Result<RunDir> {
    let mut run = RunDir::open(dir, cfg)?;
    if !run.has(PRETRAIN, "generator") {
        phases::pretrain_generator(&mut run)?;
    }
    if !run.has(DETECTORS, "detectors") {
        phases::train_detectors(&mut run, false)?;
    }
    if !run.has(SFT, "policy") {
        phases::sft(&mut run)?;
    }
    if with_stage1 && !run.has(STAGE1, "policy") {
        phases::grpo_stage1(&mut run)?;
    }
    Ok(run)
}

/// Runs a preset under `out/seed<s>/<variant>` and writes
/// `out/comparison.csv`, `out/comparison.json` and a report bundle.
pub fn ablate(preset: Preset, base: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    base.validate()?;
    if preset.variants().iter().any(|v| v.run_stage2) {
        base.validate_stage2()?;
    }
    let mut rows = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let seed_dir = out.join(format!("seed{seed}"));
        let upstream = run_upstream(&seed_dir.join("upstream"), &cfg, preset.needs_stage1())?;
        for v in preset.variants() {
            let mut vcfg = cfg.clone();
            vcfg.stage2.reward_weights = v.stage2_weights;
            let dir = seed_dir.join(v.name);
            let mut run = RunDir::open(&dir, &vcfg)?;
            for phase in [PRETRAIN, DETECTORS, SFT] {
                if !run.has(phase, phase_key(phase)) {
                    copy_phase(&upstream, &mut run, phase)?;
                }
            }
            if v.use_stage1 && !run.has(STAGE1, "policy") {
                copy_phase(&upstream, &mut run, STAGE1)?;
            }
            if v.run_stage2 && !run.has(phases::STAGE2, "generator") {
                phases::grpo_stage2(&mut run)?;
            }
            bench::score(&mut run)?;
            let summary = bench::arena(&mut run)?;
            rows.push(summary_row(seed, v.name, &summary)?);
            dirs.push(dir);
        }
    }
    let result = AblationResult {
        preset,
        seeds: seeds.to_vec(),
        rows,
    };
    let p = out.join("comparison.csv");
    fs::write(&p, result.to_csv()).map_err(|e| Error::io(&p, e))?;
    let p = out.join("comparison.json");
    fs::write(&p, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&p, e))?;
    report(&dirs, &out.join("report"))?;
    Ok(result)
}

fn phase_key(phase: &str) -> &'static str {
    match phase {
        PRETRAIN => "generator",
        DETECTORS => "detectors",
        _ => "policy",
    }
}

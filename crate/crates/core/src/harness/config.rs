use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectors::DetectorTrainConfig;
use crate::flowgen::{FlowConfig, PretrainConfig};
use crate::grpo::GrpoConfig;
use crate::promptpolicy::{PolicyConfig, SftConfig};
use crate::realbench::ArenaSchedule;
use crate::synthworld::WorldSpec;
use crate::{Error, Result};

/// Value of the mandatory `schema` key.
pub const SCHEMA: &str = "detgen/1";

/// Dataset sizes for every phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain_real: usize,
    pub detector_real: usize,
    pub detector_generated: usize,
    /// Fresh sets used only for the post-detector evaluation.
    pub eval_real: usize,
    pub eval_generated: usize,
    pub sft_corpus: usize,
    /// Share of generated detector data prompted with full captions instead
    /// of bare class prompts.
    pub detector_caption_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_real: 16384,
            detector_real: 6000,
            detector_generated: 6000,
            eval_real: 2000,
            eval_generated: 2000,
            sft_corpus: 4096,
            detector_caption_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_per_class: usize,
    /// Total battles with uniformly drawn pairs.
    pub battles: usize,
    /// If set, play this many battles for every pair instead.
    pub battles_per_pair: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_per_class: 200,
            battles: 3000,
            battles_per_pair: None,
        }
    }
}

impl BenchConfig {
    pub fn schedule(&self) -> ArenaSchedule {
        match self.battles_per_pair {
            Some(n) => ArenaSchedule::PerPair(n),
            None => ArenaSchedule::Total(self.battles),
        }
    }
}

fn stage2_default() -> GrpoConfig {
    GrpoConfig::stage2()
}

/// Keys given under `[stage2]` override the stage-2 defaults, not the
/// generic ones.
fn stage2_partial<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<GrpoConfig, D::Error> {
    use serde::de::Error as _;
    let given = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(GrpoConfig::stage2()).map_err(D::Error::custom)?;
    merged.extend(given);
    merged.try_into().map_err(D::Error::custom)
}

/// Everything a run needs. A run directory stores the normalized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Adds `wallclock_ms` to metrics lines (breaks byte reproducibility).
    #[serde(default)]
    pub record_wallclock: bool,
    /// Writes the last step's prompts / window steps under `debug/`.
    #[serde(default)]
    pub dump_trajectories: bool,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub generator: FlowConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub detectors: DetectorTrainConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default = "GrpoConfig::stage1")]
    pub stage1: GrpoConfig,
    #[serde(default = "stage2_default", deserialize_with = "stage2_partial")]
    pub stage2: GrpoConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: SCHEMA.into(),
            seed: 0,
            out_dir: None,
            record_wallclock: false,
            dump_trajectories: false,
            world: WorldSpec::default(),
            data: DataConfig::default(),
            generator: FlowConfig::default(),
            pretrain: PretrainConfig::default(),
            detectors: DetectorTrainConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            stage1: GrpoConfig::stage1(),
            stage2: GrpoConfig::stage2(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A miniature pipeline that runs in seconds. Useful for smoke tests;
    /// its numbers mean nothing.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig::default();
        c.data = DataConfig {
            pretrain_real: 512,
            detector_real: 128,
            detector_generated: 128,
            eval_real: 64,
            eval_generated: 64,
            sft_corpus: 128,
            detector_caption_fraction: 0.0,
        };
        c.generator.hidden = vec![16, 16];
        c.generator.d_cond = 4;
        c.generator.t_steps = 8;
        c.pretrain.epochs = 2;
        c.pretrain.batch = 64;
        c.detectors.steps = 20;
        c.detectors.batch = 32;
        c.detectors.anchors = 32;
        c.policy.hidden = vec![16];
        c.policy.embed_dim = 4;
        c.sft.epochs = 2;
        c.sft.batch = 32;
        for g in [&mut c.stage1, &mut c.stage2] {
            g.steps = 3;
            g.groups_per_step = 2;
            g.group_size = 4;
            g.window_len = 3;
        }
        c.bench.n_per_class = 6;
        c.bench.battles = 120;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema `{}` (expected `{SCHEMA}`)",
                self.schema
            )));
        }
        self.world.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        let g = &self.generator;
        if g.t_steps < 2 {
            return Err(Error::Config(format!("generator.t_steps must be >= 2, got {}", g.t_steps)));
        }
        if !(g.eta >= 0.0 && g.eta.is_finite()) {
            return Err(Error::Config(format!("generator.eta must be >= 0, got {}", g.eta)));
        }
        let d = &self.data;
        if d.pretrain_real == 0 || d.detector_real < 2 || d.detector_generated < 2 || d.sft_corpus == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.detector_caption_fraction) {
            return Err(Error::Config("data.detector_caption_fraction must lie in [0, 1]".into()));
        }
        if d.eval_real == 0 || d.eval_generated == 0 {
            return Err(Error::Config("evaluation sets must be non-empty".into()));
        }
        if self.bench.n_per_class == 0 {
            return Err(Error::Config("bench.n_per_class must be >= 1".into()));
        }
        if self.bench.battles == 0 && self.bench.battles_per_pair.is_none() {
            return Err(Error::Config("bench needs at least one battle".into()));
        }
        Ok(())
    }

    /// Stage-2 preconditions that can be checked before any work.
    pub fn validate_stage2(&self) -> Result<()> {
        if self.generator.eta <= 0.0 {
            return Err(Error::Config(
                "stage 2 needs generator.eta > 0: with eta = 0 transition ratios are undefined".into(),
            ));
        }
        if self.stage2.window_len >= self.generator.t_steps {
            return Err(Error::Config(format!(
                "stage2.window_len {} must be smaller than generator.t_steps {}",
                self.stage2.window_len, self.generator.t_steps
            )));
        }
        Ok(())
    }
}

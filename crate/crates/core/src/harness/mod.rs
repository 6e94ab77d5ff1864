//! Configuration, run directories, the phase pipeline, reports and
//! ablation presets.

mod ablate;
mod bench;
mod config;
mod phases;
mod report;
mod run;

pub use ablate::{ablate, default_seeds, run_upstream, AblationResult, AblationRow, Preset, Variant};
pub use bench::{
    arena, balanced_real, bench_classes, bench_samples, load_entries, mean_alignment, score, scores_csv, BenchSummary,
    EntryScores, SummaryRow, ARENA, BASELINE_ID, REAL_ID, SCORE, STAGE1_ID, STAGE2_ID,
};
pub use config::{BenchConfig, DataConfig, ExperimentConfig, SCHEMA};
pub use phases::{
    evaluate_detectors, generate, grpo_stage1, grpo_stage2, pretrain_generator, route_prompts, routing_policy, sft,
    stream, train_detectors, DetectorEval, DETECTORS, PRETRAIN, SFT, STAGE1, STAGE2,
};
pub use report::{curves_svg, heat_color, heatmap_svg, report, scatter_svg, ReportIndex, CURVE_HEADER};
pub use run::{read_json, sha256_file, FileRecord, PhaseRecord, RunDir, RunManifest, CONFIG_FILE, LOCK_FILE, MANIFEST_FILE};

#[cfg(test)]
mod tests;

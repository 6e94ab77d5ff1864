use std::fs;

use tempfile::tempdir;

use super::*;
use crate::synthworld::Token;
use crate::Error;

fn smoke_run(dir: &std::path::Path, cfg: &ExperimentConfig) -> RunDir {
    let mut run = RunDir::open(dir, cfg).unwrap();
    pretrain_generator(&mut run).unwrap();
    train_detectors(&mut run, true).unwrap();
    sft(&mut run).unwrap();
    grpo_stage1(&mut run).unwrap();
    grpo_stage2(&mut run).unwrap();
    score(&mut run).unwrap();
    arena(&mut run).unwrap();
    run
}

#[test]
fn config_roundtrips_through_toml() {
    let c = ExperimentConfig::smoke();
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn minimal_config_fills_defaults() {
    let c = ExperimentConfig::from_toml("schema = \"detgen/1\"\n").unwrap();
    assert_eq!(c, ExperimentConfig::default());
    assert_eq!(c.stage1.groups_per_step, 32);
    assert_eq!(c.stage2.groups_per_step, 12);
    assert_eq!(c.bench.battles, 3000);
}

#[test]
fn partial_stage2_table_keeps_stage2_defaults() {
    let c = ExperimentConfig::from_toml("schema = \"detgen/1\"\n[stage2]\nsteps = 7\n").unwrap();
    assert_eq!(c.stage2.steps, 7);
    assert_eq!(c.stage2.groups_per_step, 12);
    assert_eq!(c.stage2.lr, 3e-5);
}

#[test]
fn schema_is_required_and_checked() {
    assert!(matches!(ExperimentConfig::from_toml("seed = 1\n"), Err(Error::Toml(_))));
    assert!(matches!(
        ExperimentConfig::from_toml("schema = \"detgen/0\"\n"),
        Err(Error::Config(_))
    ));
}

#[test]
fn unknown_keys_are_rejected() {
    let r = ExperimentConfig::from_toml("schema = \"detgen/1\"\nsede = 3\n");
    assert!(matches!(r, Err(Error::Toml(_))));
    let r = ExperimentConfig::from_toml("schema = \"detgen/1\"\n[stage2]\nlearning_rate = 1.0\n");
    assert!(matches!(r, Err(Error::Toml(_))));
}

#[test]
fn stage2_preconditions() {
    let mut c = ExperimentConfig::default();
    c.validate_stage2().unwrap();
    c.generator.eta = 0.0;
    c.validate().unwrap();
    assert!(matches!(c.validate_stage2(), Err(Error::Config(_))));
    let mut c = ExperimentConfig::default();
    c.stage2.window_len = c.generator.t_steps;
    assert!(matches!(c.validate_stage2(), Err(Error::Config(_))));
}

#[test]
fn stage2_with_zero_eta_fails_before_work() {
    let dir = tempdir().unwrap();
    let mut c = ExperimentConfig::smoke();
    c.generator.eta = 0.0;
    let mut run = RunDir::open(dir.path(), &c).unwrap();
    assert!(matches!(grpo_stage2(&mut run), Err(Error::Config(_))));
    assert!(!run.path("metrics").exists());
}

#[test]
fn run_dir_rejects_a_different_config() {
    let dir = tempdir().unwrap();
    let c = ExperimentConfig::smoke();
    drop(RunDir::open(dir.path(), &c).unwrap());
    let mut other = c.clone();
    other.seed = 9;
    assert!(matches!(RunDir::open(dir.path(), &other), Err(Error::Config(_))));
    RunDir::open(dir.path(), &c).unwrap();
}

#[test]
fn lock_file_gives_exclusive_ownership() {
    let dir = tempdir().unwrap();
    let c = ExperimentConfig::smoke();
    let first = RunDir::open(dir.path(), &c).unwrap();
    assert!(dir.path().join(LOCK_FILE).exists());
    assert!(RunDir::open(dir.path(), &c).is_err());
    drop(first);
    assert!(!dir.path().join(LOCK_FILE).exists());
    RunDir::open(dir.path(), &c).unwrap();
}

#[test]
fn phases_need_their_inputs() {
    let dir = tempdir().unwrap();
    let mut run = RunDir::open(dir.path(), &ExperimentConfig::smoke()).unwrap();
    assert!(matches!(train_detectors(&mut run, false), Err(Error::Config(_))));
    assert!(matches!(grpo_stage1(&mut run), Err(Error::Config(_))));
    assert!(matches!(score(&mut run), Err(Error::Config(_))));
}

#[test]
fn manifest_detects_tampering() {
    let dir = tempdir().unwrap();
    let c = ExperimentConfig::smoke();
    {
        let mut run = RunDir::open(dir.path(), &c).unwrap();
        pretrain_generator(&mut run).unwrap();
        let rec = run.manifest.file(PRETRAIN, "generator").unwrap();
        assert_eq!(sha256_file(&run.path(&rec.path)).unwrap(), rec.sha256);
        run.manifest.verify(dir.path()).unwrap();
    }
    let p = dir.path().join("metrics/pretrain_loss.csv");
    let mut text = fs::read_to_string(&p).unwrap();
    text.push_str("99,0\n");
    fs::write(&p, text).unwrap();
    assert!(matches!(RunDir::open(dir.path(), &c), Err(Error::Manifest(_))));
}

#[test]
fn balanced_real_fills_every_class() {
    let world = crate::synthworld::WorldSpec::default();
    let xs = balanced_real(&world, 7, &mut stream(0, "world")).unwrap();
    assert_eq!(xs.len(), 7 * world.num_classes);
    for k in 0..world.num_classes {
        assert!(xs[k * 7..(k + 1) * 7].iter().all(|s| s.class() == k));
    }
}

#[test]
fn routing_fraction_extremes() {
    let c = ExperimentConfig::smoke();
    let policy =
        crate::promptpolicy::PromptPolicy::for_world(&c.world, &c.policy, &mut stream(0, "p")).unwrap();
    let classes = bench_classes(&c.world, 3);
    let none = route_prompts(&c.world, Some(&policy), &classes, 0.0, &stream(0, "r")).unwrap();
    assert!(none.iter().zip(&classes).all(|(p, &k)| p.tokens()[0] == Token::Cls(k)
        && p.tokens()[1..].iter().all(|t| *t == Token::Pad)));
    let all = route_prompts(&c.world, Some(&policy), &classes, 1.0, &stream(0, "r")).unwrap();
    assert!(all.iter().zip(&classes).all(|(p, &k)| p.user_class() == k));
    assert!(all.iter().any(|p| p.tokens()[1] != Token::Pad));
}

#[test]
fn smoke_pipeline_writes_every_artifact() {
    let dir = tempdir().unwrap();
    let run = smoke_run(dir.path(), &ExperimentConfig::smoke());
    for f in [
        "config.toml",
        "manifest.json",
        "checkpoints/generator_pretrained.json",
        "checkpoints/detectors.json",
        "checkpoints/policy_sft.json",
        "checkpoints/policy_stage1.json",
        "checkpoints/generator_stage2.json",
        "detectors/eval.json",
        "detectors/semantic_report.csv",
        "metrics/stage1.jsonl",
        "metrics/stage2.jsonl",
        "metrics/reward_traces_stage2.jsonl",
        "bench/battles.jsonl",
        "bench/arena_matrix.csv",
        "bench/leaderboard.csv",
        "bench/summary.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    run.manifest.verify(dir.path()).unwrap();
    let metrics = fs::read_to_string(dir.path().join("metrics/stage2.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(!metrics.contains("wallclock_ms"));
    let summary: BenchSummary = read_json(&dir.path().join("bench/summary.json")).unwrap();
    let ids: Vec<&str> = summary.rows.iter().map(|r| r.entry.as_str()).collect();
    assert_eq!(ids, [REAL_ID, BASELINE_ID, STAGE1_ID, STAGE2_ID]);
    assert!(summary.row(REAL_ID).unwrap().vs_real.is_none());
    assert_eq!(summary.battles + summary.judge_errors, 120);
}

#[test]
fn wallclock_is_opt_in() {
    let dir = tempdir().unwrap();
    let mut c = ExperimentConfig::smoke();
    c.record_wallclock = true;
    let mut run = RunDir::open(dir.path(), &c).unwrap();
    pretrain_generator(&mut run).unwrap();
    train_detectors(&mut run, false).unwrap();
    sft(&mut run).unwrap();
    grpo_stage1(&mut run).unwrap();
    let first = fs::read_to_string(dir.path().join("metrics/stage1.jsonl")).unwrap();
    assert!(first.lines().all(|l| l.contains("\"wallclock_ms\"")));
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let c = ExperimentConfig::smoke();
    let ra = smoke_run(a.path(), &c);
    let rb = smoke_run(b.path(), &c);
    for (phase, rec) in &ra.manifest.phases {
        assert_eq!(rec.files, rb.manifest.phases[phase].files, "phase {phase}");
    }
}

#[test]
fn stage2_falls_back_to_the_sft_policy() {
    let dir = tempdir().unwrap();
    let mut run = RunDir::open(dir.path(), &ExperimentConfig::smoke()).unwrap();
    pretrain_generator(&mut run).unwrap();
    train_detectors(&mut run, false).unwrap();
    sft(&mut run).unwrap();
    grpo_stage2(&mut run).unwrap();
    let rows = score(&mut run).unwrap();
    let ids: Vec<&str> = rows.iter().map(|r| r.detectors.entry.as_str()).collect();
    assert_eq!(ids, [REAL_ID, BASELINE_ID, STAGE2_ID]);
}

#[test]
fn report_over_no_runs_is_an_error() {
    let out = tempdir().unwrap();
    assert!(matches!(report(&[], out.path()), Err(Error::InvalidArgument(_))));
}

#[test]
fn report_lists_gaps_for_partial_runs() {
    let dir = tempdir().unwrap();
    let out = tempdir().unwrap();
    {
        let mut run = RunDir::open(dir.path(), &ExperimentConfig::smoke()).unwrap();
        pretrain_generator(&mut run).unwrap();
    }
    let idx = report(&[dir.path().to_path_buf()], out.path()).unwrap();
    assert!(idx.gaps.iter().any(|g| g.contains("stage-1 metrics")));
    assert!(idx.gaps.iter().any(|g| g.contains("arena")));
    let curves = fs::read_to_string(out.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1);
}

#[test]
fn report_curves_and_heatmap_match_their_sources() {
    let dir = tempdir().unwrap();
    let out = tempdir().unwrap();
    drop(smoke_run(dir.path(), &ExperimentConfig::smoke()));
    let idx = report(&[dir.path().to_path_buf()], out.path()).unwrap();
    assert!(idx.gaps.is_empty(), "{:?}", idx.gaps);

    let jsonl_lines: usize = ["metrics/stage1.jsonl", "metrics/stage2.jsonl"]
        .iter()
        .map(|f| fs::read_to_string(dir.path().join(f)).unwrap().lines().count())
        .sum();
    let curves = fs::read_to_string(out.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count() - 1, jsonl_lines);

    let label = &idx.runs[0];
    let svg = fs::read_to_string(out.path().join(format!("heatmap_{label}.svg"))).unwrap();
    let csv = fs::read_to_string(dir.path().join("bench/arena_matrix.csv")).unwrap();
    let grid: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').skip(1).map(String::from).collect()).collect();
    let mut seen = 0;
    for rect in svg.split("<rect class=\"cell\"").skip(1) {
        let attr = |name: &str| {
            let key = format!("{name}=\"");
            let start = rect.find(&key).unwrap() + key.len();
            rect[start..start + rect[start..].find('"').unwrap()].to_string()
        };
        let (i, j): (usize, usize) = (attr("data-row").parse().unwrap(), attr("data-col").parse().unwrap());
        let value: f64 = attr("data-value").parse().unwrap();
        let from_csv: f64 = grid[i][j].parse().unwrap();
        assert_eq!(value, from_csv);
        let fill = attr("fill");
        let r: f64 = fill.trim_start_matches("rgb(").split(',').next().unwrap().parse().unwrap();
        assert!((r / 255.0 - value).abs() <= 0.5 / 255.0 + 1e-12);
        seen += 1;
    }
    let played = grid.iter().flatten().filter(|c| !c.is_empty()).count();
    assert_eq!(seen, played);
}

#[test]
fn heat_color_is_linear_and_clamped() {
    assert_eq!(heat_color(0.0), (0, 64, 255));
    assert_eq!(heat_color(1.0), (255, 64, 0));
    assert_eq!(heat_color(2.0), heat_color(1.0));
    assert_eq!(heat_color(0.5).0, 128);
}

#[test]
fn presets_parse() {
    assert_eq!("reward-swap".parse::<Preset>().unwrap(), Preset::RewardSwap);
    assert_eq!("stage-wise".parse::<Preset>().unwrap(), Preset::StageWise);
    assert!("swap".parse::<Preset>().is_err());
    let names: Vec<_> = Preset::RewardSwap.variants().iter().map(|v| v.name).collect();
    assert_eq!(names, ["full", "alignment-only", "feature-only"]);
    assert_eq!(default_seeds(4), [4, 5, 6]);
}

#[test]
fn smoke_ablation_reuses_upstream_checkpoints() {
    let out = tempdir().unwrap();
    let res = ablate(Preset::RewardSwap, &ExperimentConfig::smoke(), &[0], out.path()).unwrap();
    assert_eq!(res.rows.len(), 3);
    assert!(res.rows.iter().all(|r| r.entry == STAGE2_ID));
    let base = res.rows[0].baseline_heldout;
    assert!(res.rows.iter().all(|r| r.baseline_heldout == base));
    let up = fs::read(out.path().join("seed0/upstream/checkpoints/generator_pretrained.json")).unwrap();
    let full = fs::read(out.path().join("seed0/full/checkpoints/generator_pretrained.json")).unwrap();
    assert_eq!(up, full);
    assert!(out.path().join("comparison.csv").exists());
    assert!(out.path().join("report/report.json").exists());
}

use super::*;
use crate::detectors::{train_detectors, DetectorTrainConfig, InputNorm};
use crate::flowgen::{sample_ode_batch, FlowConfig, FlowModel};
use crate::synthworld::{sample_real, user_prompt, WorldSpec};

/// Realism = closeness to the nearest fine-mode mean.
struct ManifoldJudge(WorldSpec);

impl Judge for ManifoldJudge {
    fn realism(&self, x: &[f64]) -> Result<f64> {
        Ok((-self.0.nearest_fine_mode(x).2).exp())
    }
}

struct FixedJudge;

impl Judge for FixedJudge {
    fn realism(&self, x: &[f64]) -> Result<f64> {
        Ok(x[0])
    }
}

/// Fails whenever the first coordinate is negative.
struct FlakyJudge;

impl Judge for FlakyJudge {
    fn realism(&self, x: &[f64]) -> Result<f64> {
        if x[0] < 0.0 {
            Err(Error::Judge("refused".into()))
        } else {
            Ok(x[1])
        }
    }
}

fn real_entry(id: &str, seed: u64, n: usize) -> Entry {
    let w = WorldSpec::default();
    let s = sample_real(&w, n, &mut Rng::new(seed, 0)).unwrap();
    Entry::from_samples(id, EntryKind::Real, &s, 8).unwrap()
}

fn untrained_entry(seed: u64, n: usize) -> (Entry, Vec<Sample>) {
    let w = WorldSpec::default();
    let mut rng = Rng::new(seed, 0);
    let g = FlowModel::new(&w, &FlowConfig::default(), &mut rng).unwrap();
    let conds: Vec<_> = (0..n).map(|i| user_prompt(&w, i % 8).unwrap()).collect();
    let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng.child(i)).collect();
    let s = sample_ode_batch(&g, &conds, &mut rngs).unwrap();
    let kind = EntryKind::Model {
        checkpoint: "untrained".into(),
    };
    (Entry::from_samples("untrained", kind, &s, 8).unwrap(), s)
}

fn model(id: &str, e: &Entry) -> Entry {
    let kind = EntryKind::Model { checkpoint: id.into() };
    Entry::new(id, kind, (0..e.num_classes()).map(|k| e.pool(k).to_vec()).collect()).unwrap()
}

#[test]
fn wilson_hand_values() {
    let (lo, hi) = wilson(50, 100, Z95);
    assert!((lo - 0.403832).abs() < 1e-5 && (hi - 0.596168).abs() < 1e-5, "{lo} {hi}");
    let (lo, hi) = wilson(0, 10, Z95);
    assert_eq!(lo, 0.0);
    assert!((hi - 0.277533).abs() < 1e-5, "{hi}");
    assert_eq!(wilson(0, 0, Z95), (0.0, 1.0));
}

#[test]
fn judge_basic_cases() {
    let mut rng = Rng::new(0, 0);
    let v = judge_pair(&FixedJudge, &[0.9], &[0.1], &mut rng).unwrap();
    assert!(v.a_wins);
    assert!((v.margin - 0.8).abs() < 1e-15);
    let w = judge_pair(&FixedJudge, &[0.1], &[0.9], &mut rng).unwrap();
    assert!(!w.a_wins);
    assert_eq!(v.margin, w.margin);
}

#[test]
fn ties_are_fair_coins() {
    let w = WorldSpec::default();
    let det = FeatureDetector::new(2, 8, InputNorm::identity(2), &mut Rng::new(1, 0)).unwrap();
    let root = Rng::new(2, 0);
    let n = 10_000;
    let wins = (0..n as u64)
        .filter(|&i| {
            let x = w.class_mean((i % 8) as usize);
            judge_heldout(&x, &x, &det, &mut root.child(i)).a_wins
        })
        .count();
    let sd = (0.25 / n as f64).sqrt();
    assert!((wins as f64 / n as f64 - 0.5).abs() <= 3.0 * sd);
}

#[test]
fn same_pool_entries_are_even() {
    let real = real_entry("a", 1, 800);
    let b = model("b", &real);
    let res = run_arena(&[real, b], &ManifoldJudge(WorldSpec::default()), ArenaSchedule::Total(3000), &Rng::new(3, 0)).unwrap();
    let w = res.matrix.cell(0, 1).unwrap();
    assert_eq!(w.battles, 3000);
    assert!(w.lo <= 0.5 && 0.5 <= w.hi, "{w:?}");
    assert!(res.matrix.is_conserved());
}

#[test]
fn matrix_conservation_and_complement() {
    let real = real_entry("real", 2, 400);
    let (u, _) = untrained_entry(3, 400);
    let copy = model("copy", &real);
    let entries = [real, u, copy];
    let res = run_arena(&entries, &ManifoldJudge(WorldSpec::default()), ArenaSchedule::Total(3000), &Rng::new(4, 0)).unwrap();
    let m = &res.matrix;
    assert!(m.is_conserved());
    assert_eq!(m.totals.iter().flatten().sum::<u64>(), 2 * 3000);
    for i in 0..3 {
        for j in 0..3 {
            if let (Some(a), Some(b)) = (m.cell(i, j), m.cell(j, i)) {
                assert!((a.rate + b.rate - 1.0).abs() < 1e-12);
            }
        }
    }
    // real index is the first real entry
    assert_eq!(m.real_index, Some(0));
    let copy = vs_real_winrate(m, "copy").unwrap();
    assert!(copy.lo <= 0.5 && 0.5 <= copy.hi, "{copy:?}");
    let u = vs_real_winrate(m, "untrained").unwrap();
    let back = m.cell(0, 1).unwrap();
    assert!((u.rate + back.rate - 1.0).abs() < 1e-12);
    assert!(back.rate > 0.9, "{back:?}");
}

#[test]
fn off_manifold_entry_loses() {
    let real = real_entry("real", 5, 400);
    let point = Entry::new(
        "point",
        EntryKind::Model { checkpoint: "fixed".into() },
        vec![vec![vec![0.0, 0.0]]; 8],
    )
    .unwrap();
    let res = run_arena(&[real, point], &ManifoldJudge(WorldSpec::default()), ArenaSchedule::Total(3000), &Rng::new(5, 0)).unwrap();
    assert!(vs_real_winrate(&res.matrix, "point").unwrap().rate < 0.1);
}

#[test]
fn battle_log_is_reproducible() {
    let real = real_entry("real", 6, 200);
    let (u, _) = untrained_entry(7, 200);
    let entries = [real, u];
    let judge = ManifoldJudge(WorldSpec::default());
    let log = |seed| {
        let res = run_arena(&entries, &judge, ArenaSchedule::Total(500), &Rng::new(seed, 0)).unwrap();
        let mut buf = Vec::new();
        write_battle_log(&mut buf, &res.battles).unwrap();
        buf
    };
    assert_eq!(log(1), log(1));
    assert_ne!(log(1), log(2));
    let first: Battle = serde_json::from_slice(log(1).split(|b| *b == b'\n').next().unwrap()).unwrap();
    assert_eq!(first.battle_id, 0);
    assert!(first.entry_a != first.entry_b);
    assert!(first.winner == first.entry_a || first.winner == first.entry_b);
}

#[test]
fn judge_failures_are_retried_then_excluded() {
    let pos = Entry::new("pos", EntryKind::Real, vec![vec![vec![1.0, 0.5]]; 2]).unwrap();
    let mixed = Entry::new(
        "mixed",
        EntryKind::Model { checkpoint: "m".into() },
        vec![vec![vec![1.0, 0.2], vec![-1.0, 0.9]]; 2],
    )
    .unwrap();
    let res = run_arena(&[pos, mixed], &FlakyJudge, ArenaSchedule::Total(2000), &Rng::new(8, 0)).unwrap();
    // each attempt fails with probability 1/2, so about a quarter are dropped
    let dropped = res.judge_errors as f64 / 2000.0;
    assert!((dropped - 0.25).abs() < 0.05, "{dropped}");
    assert_eq!(res.battles.len() + res.judge_errors, 2000);
    assert_eq!(res.matrix.totals[0][1] as usize, res.battles.len());
    assert!(res.matrix.is_conserved());
}

#[test]
fn per_pair_schedule() {
    let a = real_entry("a", 1, 80);
    let b = model("b", &a);
    let c = model("c", &a);
    let res = run_arena(&[a, b, c], &ManifoldJudge(WorldSpec::default()), ArenaSchedule::PerPair(40), &Rng::new(1, 1)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(res.matrix.totals[i][j], if i == j { 0 } else { 40 });
        }
    }
}

#[test]
fn arena_preconditions() {
    let a = real_entry("a", 1, 80);
    let judge = FixedJudge;
    assert!(run_arena(std::slice::from_ref(&a), &judge, ArenaSchedule::Total(10), &Rng::new(0, 0)).is_err());
    let dup = a.clone();
    assert!(run_arena(&[a.clone(), dup], &judge, ArenaSchedule::Total(10), &Rng::new(0, 0)).is_err());
    let b = model("b", &a);
    assert!(run_arena(&[a.clone(), b.clone()], &judge, ArenaSchedule::Total(0), &Rng::new(0, 0)).is_err());
    let res = run_arena(&[b.clone(), model("c", &a)], &judge, ArenaSchedule::Total(10), &Rng::new(0, 0)).unwrap();
    assert!(vs_real_winrate(&res.matrix, "b").is_err());
    assert!(Entry::new("e", EntryKind::Real, vec![vec![], vec![vec![0.0, 0.0]]]).is_err());
}

fn trained_suite() -> (DetectorSuite, Vec<Sample>, Vec<Sample>) {
    let w = WorldSpec::default();
    let real = sample_real(&w, 1600, &mut Rng::new(11, 0)).unwrap();
    let (_, fake) = untrained_entry(12, 1600);
    let cfg = DetectorTrainConfig {
        steps: 300,
        ..DetectorTrainConfig::default()
    };
    (train_detectors(&w, &real, &fake, &cfg, &Rng::new(13, 0)).unwrap(), real, fake)
}

#[test]
fn detector_scoring_properties() {
    let (suite, _, _) = trained_suite();
    let held_real = real_entry("real", 99, 800);
    let (u, _) = untrained_entry(14, 800);
    let sr = detector_scoring(&held_real, &suite, 50).unwrap();
    let su = detector_scoring(&u, &suite, 50).unwrap();
    assert_eq!(sr.samples, 400);
    for s in [&sr, &su] {
        for v in [s.semantic, s.feature, s.heldout] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(sr.heldout > su.heldout, "{sr:?} vs {su:?}");

    let doubled = Entry::new(
        "real",
        EntryKind::Real,
        (0..8)
            .map(|k| {
                let mut p = held_real.pool(k).to_vec();
                p.extend(held_real.pool(k).to_vec());
                p
            })
            .collect(),
    )
    .unwrap();
    for n in [7, 50, 250] {
        assert_eq!(
            detector_scoring(&held_real, &suite, n).unwrap(),
            detector_scoring(&doubled, &suite, n).unwrap()
        );
    }
    assert!(detector_scoring(&u, &suite, 0).is_err());
}

#[test]
fn reports_render() {
    let real = real_entry("real", 1, 100);
    let b = model("b", &real);
    let res = run_arena(&[real, b], &FixedJudge, ArenaSchedule::Total(100), &Rng::new(0, 0)).unwrap();
    let csv = res.matrix.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "entry,real,b");
    assert!(lines[1].starts_with("real,,"));
    let js = res.matrix.to_json();
    assert!(js["win_rates"][0][1]["lo"].is_number());
    assert!(js["win_rates"][0][0].is_null());
    let scores = vec![DetectorScores {
        entry: "b".into(),
        semantic: 0.1,
        feature: 0.2,
        heldout: 0.3,
        samples: 8,
    }];
    let lb = leaderboard_csv(&res.matrix, &scores).unwrap();
    let rows: Vec<&str> = lb.lines().collect();
    assert_eq!(rows[0], "entry,overall_win_rate,vs_real_win_rate,semantic,feature,heldout");
    assert!(rows[2].starts_with("b,") && rows[2].ends_with(",0.1,0.2,0.3"));
    assert!(rows[1].ends_with(",,,,"));
}

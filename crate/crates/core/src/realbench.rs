//! Human-free evaluation: per-detector realism scores and prompt-matched
//! forced-choice arena battles judged by a reward-independent detector.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{real_probability, DetectorSuite, FeatureDetector};
use crate::numkit::Rng;
use crate::synthworld::Sample;
use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Margins below this are treated as ties and broken by a coin flip.
pub const TIE_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EntryKind {
    Model { checkpoint: String },
    Real,
}

/// An arena participant with one sample pool per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub kind: EntryKind,
    pools: Vec<Vec<Vec<f64>>>,
}

impl Entry {
    pub fn new(id: impl Into<String>, kind: EntryKind, pools: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let id = id.into();
        if pools.is_empty() {
            return Err(Error::InvalidArgument(format!("entry `{id}` has no classes")));
        }
        if let Some(k) = pools.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("entry `{id}` has an empty pool for class {k}")));
        }
        Ok(Entry { id, kind, pools })
    }

    /// Groups samples by their prompted class.
    pub fn from_samples(id: impl Into<String>, kind: EntryKind, samples: &[Sample], num_classes: usize) -> Result<Self> {
        let mut pools = vec![Vec::new(); num_classes];
        for s in samples {
            let k = s.class();
            if k >= num_classes {
                return Err(Error::InvalidArgument(format!("sample class {k} out of range")));
            }
            pools[k].push(s.x.clone());
        }
        Entry::new(id, kind, pools)
    }

    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, class: usize) -> &[Vec<f64>] {
        &self.pools[class]
    }

    pub fn is_real(&self) -> bool {
        self.kind == EntryKind::Real
    }
}

/// Mean realism per detector for one entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorScores {
    pub entry: String,
    pub semantic: f64,
    pub feature: f64,
    /// Not used by any reward.
    pub heldout: f64,
    pub samples: usize,
}

/// Scores the first `n_per_class` samples of every class pool (cycling
/// through short pools).
pub fn detector_scoring(entry: &Entry, detectors: &DetectorSuite, n_per_class: usize) -> Result<DetectorScores> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for pool in &entry.pools {
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!("entry `{}` has an empty pool", entry.id)));
        }
        for i in 0..n_per_class {
            let x = &pool[i % pool.len()];
            acc[0] += real_probability(detectors.semantic.logits(x));
            acc[1] += detectors.feature.real_probability(x);
            acc[2] += detectors.heldout.real_probability(x);
            n += 1;
        }
    }
    let n_f = n as f64;
    Ok(DetectorScores {
        entry: entry.id.clone(),
        semantic: acc[0] / n_f,
        feature: acc[1] / n_f,
        heldout: acc[2] / n_f,
        samples: n,
    })
}

/// Scores a single sample's realism; higher wins a battle.
pub trait Judge: Sync {
    fn realism(&self, x: &[f64]) -> Result<f64>;
}

/// The default judge: the held-out detector's `P(real)`.
pub struct HeldoutJudge<'a>(pub &'a FeatureDetector);

impl Judge for HeldoutJudge<'_> {
    fn realism(&self, x: &[f64]) -> Result<f64> {
        let p = self.0.real_probability(x);
        if p.is_finite() {
            Ok(p)
        } else {
            Err(Error::Judge("held-out detector returned a non-finite score".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub a_wins: bool,
    pub margin: f64,
}

/// Forced choice between `a` and `b`; near-ties go to a fair coin from `rng`.
pub fn judge_pair<J: Judge + ?Sized>(judge: &J, a: &[f64], b: &[f64], rng: &mut Rng) -> Result<Verdict> {
    let (pa, pb) = (judge.realism(a)?, judge.realism(b)?);
    let margin = (pa - pb).abs();
    let a_wins = if margin < TIE_MARGIN { rng.coin() } else { pa > pb };
    Ok(Verdict { a_wins, margin })
}

pub fn judge_heldout(a: &[f64], b: &[f64], detector: &FeatureDetector, rng: &mut Rng) -> Verdict {
    judge_pair(&HeldoutJudge(detector), a, b, rng).expect("held-out judge is total")
}

/// One line of the battle log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Battle {
    pub battle_id: usize,
    pub class: usize,
    /// Presented first.
    pub entry_a: String,
    pub entry_b: String,
    pub margin: f64,
    pub winner: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArenaSchedule {
    /// Battles in total, pairs drawn uniformly.
    Total(usize),
    /// Battles for every unordered pair.
    PerPair(usize),
}

impl Default for ArenaSchedule {
    fn default() -> Self {
        ArenaSchedule::Total(3000)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
    pub battles: u64,
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn win_rate(k: u64, n: u64) -> Option<WinRate> {
    (n > 0).then(|| {
        let (lo, hi) = wilson(k, n, Z95);
        WinRate {
            rate: k as f64 / n as f64,
            lo,
            hi,
            battles: n,
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub entries: Vec<String>,
    pub real_index: Option<usize>,
    /// `counts[i][j]`: battles between `i` and `j` won by `i`.
    pub counts: Vec<Vec<u64>>,
    pub totals: Vec<Vec<u64>>,
}

impl WinMatrix {
    pub fn new(entries: Vec<String>, real_index: Option<usize>) -> Self {
        let n = entries.len();
        WinMatrix {
            entries,
            real_index,
            counts: vec![vec![0; n]; n],
            totals: vec![vec![0; n]; n],
        }
    }

    pub fn record(&mut self, winner: usize, loser: usize) {
        self.counts[winner][loser] += 1;
        self.totals[winner][loser] += 1;
        self.totals[loser][winner] += 1;
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown entry `{id}`")))
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<WinRate> {
        win_rate(self.counts[i][j], self.totals[i][j])
    }

    /// Win rate of `i` over all its battles.
    pub fn overall(&self, i: usize) -> Option<WinRate> {
        win_rate(self.counts[i].iter().sum(), self.totals[i].iter().sum())
    }

    pub fn is_conserved(&self) -> bool {
        let n = self.entries.len();
        (0..n).all(|i| {
            self.totals[i][i] == 0
                && (0..n).all(|j| {
                    self.counts[i][j] + self.counts[j][i] == self.totals[i][j]
                        && self.totals[i][j] == self.totals[j][i]
                })
        })
    }

    /// Win-rate matrix as CSV; unplayed cells and the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("entry");
        for e in &self.entries {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(e);
            for j in 0..self.entries.len() {
                out.push(',');
                if let Some(w) = self.cell(i, j) {
                    let _ = write!(out, "{}", w.rate);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Counts, totals and Wilson intervals per cell and per entry.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.entries.len();
        let cells: Vec<Vec<Option<WinRate>>> = (0..n).map(|i| (0..n).map(|j| self.cell(i, j)).collect()).collect();
        let overall: Vec<Option<WinRate>> = (0..n).map(|i| self.overall(i)).collect();
        serde_json::json!({
            "entries": self.entries,
            "real_index": self.real_index,
            "counts": self.counts,
            "totals": self.totals,
            "win_rates": cells,
            "overall": overall,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaResult {
    pub matrix: WinMatrix,
    pub battles: Vec<Battle>,
    /// Battles dropped after a failed retry.
    pub judge_errors: usize,
}

fn draw_pair(n: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.below(n);
    let mut j = rng.below(n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

fn fight<J: Judge + ?Sized>(
    entries: &[Entry],
    pair: (usize, usize),
    class: usize,
    judge: &J,
    rng: &mut Rng,
) -> Result<(usize, usize, f64, bool)> {
    let (i, j) = pair;
    let xi = &entries[i].pools[class][rng.below(entries[i].pools[class].len())];
    let xj = &entries[j].pools[class][rng.below(entries[j].pools[class].len())];
    let (first, second, a, b) = if rng.coin() { (j, i, xj, xi) } else { (i, j, xi, xj) };
    let v = judge_pair(judge, a, b, rng)?;
    Ok((first, second, v.margin, v.a_wins))
}

/// Runs the arena. Battle `b` draws everything from `rng.child(b)`.
pub fn run_arena<J: Judge + ?Sized>(entries: &[Entry], judge: &J, schedule: ArenaSchedule, rng: &Rng) -> Result<ArenaResult> {
    if entries.len() < 2 {
        return Err(Error::InvalidArgument("the arena needs at least two entries".into()));
    }
    let k = entries[0].num_classes();
    if entries.iter().any(|e| e.num_classes() != k) {
        return Err(Error::InvalidArgument("entries disagree on the number of classes".into()));
    }
    let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != entries.len() {
        return Err(Error::InvalidArgument("entry ids must be unique".into()));
    }
    let n = entries.len();
    let pairs: Vec<Option<(usize, usize)>> = match schedule {
        ArenaSchedule::Total(0) | ArenaSchedule::PerPair(0) => {
            return Err(Error::InvalidArgument("need at least one battle".into()))
        }
        ArenaSchedule::Total(b) => vec![None; b],
        ArenaSchedule::PerPair(b) => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .flat_map(|p| std::iter::repeat_n(Some(p), b))
            .collect(),
    };
    let outcomes: Vec<Option<(usize, usize, usize, f64, bool)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(b, fixed)| {
            let mut brng = rng.child(b as u64);
            let pair = fixed.unwrap_or_else(|| draw_pair(n, &mut brng));
            let class = brng.below(k);
            for _attempt in 0..2 {
                if let Ok((a, bb, margin, a_wins)) = fight(entries, pair, class, judge, &mut brng) {
                    return Some((class, a, bb, margin, a_wins));
                }
            }
            None
        })
        .collect();

    let real_index = entries.iter().position(Entry::is_real);
    let mut matrix = WinMatrix::new(entries.iter().map(|e| e.id.clone()).collect(), real_index);
    let mut battles = Vec::with_capacity(outcomes.len());
    let mut judge_errors = 0;
    for (b, o) in outcomes.into_iter().enumerate() {
        let Some((class, a, bb, margin, a_wins)) = o else {
            judge_errors += 1;
            continue;
        };
        let (w, l) = if a_wins { (a, bb) } else { (bb, a) };
        matrix.record(w, l);
        battles.push(Battle {
            battle_id: b,
            class,
            entry_a: entries[a].id.clone(),
            entry_b: entries[bb].id.clone(),
            margin,
            winner: entries[w].id.clone(),
        });
    }
    Ok(ArenaResult {
        matrix,
        battles,
        judge_errors,
    })
}

/// Win rate of `entry` against the real-data entry.
pub fn vs_real_winrate(matrix: &WinMatrix, entry: &str) -> Result<WinRate> {
    let r = matrix
        .real_index
        .ok_or_else(|| Error::InvalidArgument("no real entry in the arena".into()))?;
    let i = matrix.index_of(entry)?;
    matrix
        .cell(i, r)
        .ok_or_else(|| Error::InvalidArgument(format!("`{entry}` never battled the real entry")))
}

pub fn write_battle_log<W: Write>(mut w: W, battles: &[Battle]) -> Result<()> {
    for b in battles {
        serde_json::to_writer(&mut w, b)?;
        w.write_all(b"\n").map_err(|e| Error::io("<battle log>", e))?;
    }
    Ok(())
}

/// `entry,overall_win_rate,vs_real_win_rate,semantic,feature,heldout`
pub fn leaderboard_csv(matrix: &WinMatrix, scores: &[DetectorScores]) -> Result<String> {
    let mut out = String::from("entry,overall_win_rate,vs_real_win_rate,semantic,feature,heldout\n");
    for (i, e) in matrix.entries.iter().enumerate() {
        let overall = matrix.overall(i).map(|w| w.rate.to_string()).unwrap_or_default();
        let vs_real = match matrix.real_index {
            Some(r) if r != i => matrix.cell(i, r).map(|w| w.rate.to_string()).unwrap_or_default(),
            _ => String::new(),
        };
        let s = scores
            .iter()
            .find(|s| &s.entry == e)
            .map(|s| format!("{},{},{}", s.semantic, s.feature, s.heldout))
            .unwrap_or_else(|| ",,".into());
        let _ = writeln!(out, "{e},{overall},{vs_real},{s}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

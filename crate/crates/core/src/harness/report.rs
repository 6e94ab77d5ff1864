use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{BenchSummary, ARENA, BASELINE_ID, REAL_ID, SCORE, STAGE2_ID};
use super::phases::{STAGE1, STAGE2};
use super::run::{RunDir, MANIFEST_FILE};
use crate::grpo::StepMetrics;
use crate::realbench::WinMatrix;
use crate::synthworld::{read_samples_jsonl, Sample};
use crate::{Error, Result};

/// What a report bundle contains; `gaps` lists every missing input.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub runs: Vec<String>,
    pub files: Vec<String>,
    pub gaps: Vec<String>,
}

struct Loaded {
    label: String,
    run: RunDir,
}

fn labels(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    dirs.iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"));
            let mut l = base.clone();
            let mut n = 1;
            while !seen.insert(l.clone()) {
                n += 1;
                l = format!("{base}-{n}");
            }
            l
        })
        .collect()
}

fn read_metrics(run: &RunDir, phase: &str) -> Result<Vec<StepMetrics>> {
    let bytes = run.read_verified(phase, "metrics")?;
    let text = String::from_utf8_lossy(&bytes);
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub const CURVE_HEADER: &str =
    "run,stage,step,reward_sem,reward_feat,reward_align,mean_advantage_abs,clip_fraction,mean_kl,mean_ratio,loss";

fn curve_row(out: &mut String, label: &str, m: &StepMetrics) {
    let r = &m.mean_reward;
    let _ = writeln!(
        out,
        "{label},{},{},{},{},{},{},{},{},{},{}",
        m.stage, m.step, r.sem, r.feat, r.align, m.mean_advantage_abs, m.clip_fraction, m.mean_kl, m.mean_ratio, m.loss
    );
}

/// Builds the report bundle in `out`. Fails only if `runs` is empty or
/// an input cannot be read at all; missing phases become gaps.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportIndex> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut loaded = Vec::new();
    let mut index = ReportIndex::default();
    for (dir, label) in runs.iter().zip(labels(runs)) {
        if !dir.join(MANIFEST_FILE).exists() {
            index.gaps.push(format!("{label}: no manifest in {}", dir.display()));
            continue;
        }
        loaded.push(Loaded {
            label: label.clone(),
            run: RunDir::open_existing(dir)?,
        });
        index.runs.push(label);
    }

    let put = |name: &str, body: &str, index: &mut ReportIndex| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        index.files.push(name.to_string());
        Ok(())
    };

    let mut curves = format!("{CURVE_HEADER}\n");
    let mut scores = String::from("run,entry,semantic,feature,heldout,alignment,overall_win_rate,vs_real_win_rate,vs_real_lo,vs_real_hi\n");
    let mut winrates = String::from("run,entry,opponent,win_rate,lo,hi,battles\n");
    for l in &loaded {
        let mut series = Vec::new();
        for (phase, stage) in [(STAGE1, 1u8), (STAGE2, 2u8)] {
            if !l.run.has(phase, "metrics") {
                index.gaps.push(format!("{}: no stage-{stage} metrics", l.label));
                continue;
            }
            let ms = read_metrics(&l.run, phase)?;
            for m in &ms {
                curve_row(&mut curves, &l.label, m);
            }
            series.push((stage, ms));
        }
        if !series.is_empty() {
            put(&format!("curves_{}.svg", l.label), &curves_svg(&l.label, &series), &mut index)?;
        }

        if l.run.has(ARENA, "summary") {
            let summary: BenchSummary = l.run.load_json(ARENA, "summary")?;
            for r in &summary.rows {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(
                    scores,
                    "{},{},{},{},{},{},{},{},{},{}",
                    l.label,
                    r.entry,
                    r.semantic,
                    r.feature,
                    r.heldout,
                    opt(r.alignment),
                    opt(r.overall.map(|w| w.rate)),
                    opt(r.vs_real.map(|w| w.rate)),
                    opt(r.vs_real.map(|w| w.lo)),
                    opt(r.vs_real.map(|w| w.hi)),
                );
            }
            let m: WinMatrix = l.run.load_json(ARENA, "matrix")?;
            for i in 0..m.entries.len() {
                for j in 0..m.entries.len() {
                    if let Some(w) = m.cell(i, j) {
                        let _ = writeln!(
                            winrates,
                            "{},{},{},{},{},{},{}",
                            l.label, m.entries[i], m.entries[j], w.rate, w.lo, w.hi, w.battles
                        );
                    }
                }
            }
            put(&format!("heatmap_{}.svg", l.label), &heatmap_svg(&m), &mut index)?;
        } else {
            index.gaps.push(format!("{}: no arena results", l.label));
        }

        let mut pools = Vec::new();
        for id in [REAL_ID, BASELINE_ID, STAGE2_ID] {
            let key = format!("samples_{id}");
            if l.run.has(SCORE, &key) {
                let bytes = l.run.read_verified(SCORE, &key)?;
                pools.push((id, read_samples_jsonl(bytes.as_slice())?));
            } else {
                index.gaps.push(format!("{}: no `{id}` bench samples", l.label));
            }
        }
        if !pools.is_empty() {
            put(&format!("scatter_{}.svg", l.label), &scatter_svg(&pools), &mut index)?;
        }
    }
    put("curves.csv", &curves, &mut index)?;
    put("scores.csv", &scores, &mut index)?;
    put("winrates.csv", &winrates, &mut index)?;
    index.files.push("report.json".into());
    let p = out.join("report.json");
    fs::write(&p, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

/// Linear blue-to-red ramp; `w = 0` is blue, `w = 1` red.
pub fn heat_color(w: f64) -> (u8, u8, u8) {
    let w = w.clamp(0.0, 1.0);
    ((255.0 * w).round() as u8, 64, (255.0 * (1.0 - w)).round() as u8)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heat map of the win-rate matrix. Each played cell carries its exact
/// rate in `data-value`, the same text as in the CSV.
pub fn heatmap_svg(m: &WinMatrix) -> String {
    let n = m.entries.len();
    let (cell, left, top) = (70.0, 90.0, 40.0);
    let w = left + cell * n as f64 + 10.0;
    let h = top + cell * n as f64 + 10.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (j, e) in m.entries.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>", top - 8.0, esc(e));
    }
    for i in 0..n {
        let y = top + cell * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left - 6.0, y + cell / 2.0 + 4.0, esc(&m.entries[i]));
        for j in 0..n {
            let x = left + cell * j as f64;
            match m.cell(i, j) {
                Some(wr) => {
                    let (r, g, b) = heat_color(wr.rate);
                    let _ = writeln!(
                        s,
                        "<rect class=\"cell\" data-row=\"{i}\" data-col=\"{j}\" data-value=\"{}\" x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"/>",
                        wr.rate
                    );
                    let _ = writeln!(
                        s,
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"white\">{:.3}</text>",
                        x + cell / 2.0,
                        y + cell / 2.0 + 4.0,
                        wr.rate
                    );
                }
                None => {
                    let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"#dddddd\"/>");
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Panel {
    title: String,
    lines: Vec<(String, Vec<(f64, f64)>)>,
}

fn bounds(pts: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn panels_svg(panels: &[Panel]) -> String {
    let (pw, ph, pad) = (420.0, 220.0, 40.0);
    let height = panels.len() as f64 * (ph + 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        pw + 2.0 * pad + 120.0
    );
    for (k, p) in panels.iter().enumerate() {
        let oy = k as f64 * (ph + 2.0 * pad) + pad;
        let (x0, x1, y0, y1) = bounds(p.lines.iter().flat_map(|(_, v)| v.iter().copied()));
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| oy + ph - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\">{}</text>", oy - 8.0, esc(&p.title));
        let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{oy}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>", pad - 4.0, oy + 10.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text>", pad - 4.0, oy + ph);
        for (i, (name, pts)) in p.lines.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", pad + pw + 8.0, oy + 14.0 * (i as f64 + 1.0), esc(name));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Reward and loss curves, one pair of panels per stage.
pub fn curves_svg(label: &str, series: &[(u8, Vec<StepMetrics>)]) -> String {
    let mut panels = Vec::new();
    for (stage, ms) in series {
        let pick = |f: fn(&StepMetrics) -> f64| ms.iter().map(|m| (m.step as f64, f(m))).collect::<Vec<_>>();
        panels.push(Panel {
            title: format!("{label} stage {stage}: mean rewards"),
            lines: vec![
                ("semantic".into(), pick(|m| m.mean_reward.sem)),
                ("feature".into(), pick(|m| m.mean_reward.feat)),
                ("alignment".into(), pick(|m| m.mean_reward.align)),
            ],
        });
        panels.push(Panel {
            title: format!("{label} stage {stage}: loss and KL"),
            lines: vec![("loss".into(), pick(|m| m.loss)), ("kl".into(), pick(|m| m.mean_kl))],
        });
    }
    panels_svg(&panels)
}

/// 2-D scatter of the first two coordinates, one colour per pool.
pub fn scatter_svg(pools: &[(&str, Vec<Sample>)]) -> String {
    let (size, pad) = (480.0, 30.0);
    let (x0, x1, y0, y1) = bounds(pools.iter().flat_map(|(_, v)| v.iter().map(|s| (s.x[0], s.x.get(1).copied().unwrap_or(0.0)))));
    let span = (x1 - x0).max(y1 - y0);
    let sx = |x: f64| pad + (x - x0) / span * size;
    let sy = |y: f64| pad + size - (y - y0) / span * size;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        size + 2.0 * pad + 100.0,
        size + 2.0 * pad
    );
    for (i, (name, samples)) in pools.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<g class=\"pool\" data-entry=\"{}\" fill=\"{c}\" fill-opacity=\"0.5\">", esc(name));
        for p in samples {
            let y = p.x.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\"/>", sx(p.x[0]), sy(y));
        }
        s.push_str("</g>\n");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", size + 2.0 * pad, pad + 14.0 * (i as f64 + 1.0), esc(name));
    }
    s.push_str("</svg>\n");
    s
}

//! Frozen reward models and evaluators.
//!
//! * [`SemanticDetector`]: logistic head over interpretable summary
//!   statistics of a sample (distance to modes, density proxy, ...).
//! * [`FeatureDetector`]: MLP over raw coordinates giving `P(fake)`. The
//!   held-out evaluator has the same type but is trained on a disjoint data
//!   half with a different width and seed, and never feeds a reward.
//! * [`AlignmentClassifier`]: class posterior used to keep prompt fidelity.

use serde::{Deserialize, Serialize};

use crate::numkit::{log_sum_exp, sigmoid, Activation, Adam, AdamConfig, Params, Rng};
use crate::synthworld::{sq_dist, Sample, WorldSpec};
use crate::{Error, Mlp64, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorLogits {
    pub l_fake: f64,
    pub l_real: f64,
}

/// `softmax([l_fake, l_real])[1]`, written as a sigmoid of the gap so it
/// stays finite for gaps of several hundred.
pub fn real_probability(l: DetectorLogits) -> f64 {
    sigmoid(l.l_real - l.l_fake)
}

/// Per-coordinate standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for c in 0..d {
                std[c] += (r[c] - mean[c]).powi(2) / n;
            }
        }
        let std = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        InputNorm { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        InputNorm {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Semantic-level statistics. The anchor set is frozen at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatExtractor {
    pub world: WorldSpec,
    pub anchors: Vec<Vec<f64>>,
    pub knn: usize,
}

impl StatExtractor {
    pub fn names(&self) -> Vec<String> {
        let mut n = vec![
            "dist_fine_mode".to_string(),
            "dist_class_mean".to_string(),
            "radius".to_string(),
        ];
        n.extend((0..self.world.dim).map(|c| format!("absdev_{c}")));
        n.push(format!("knn{}_dist", self.knn));
        n
    }

    pub fn len(&self) -> usize {
        4 + self.world.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn nearest(points: impl Iterator<Item = Vec<f64>>, x: &[f64]) -> (Vec<f64>, f64) {
        let mut best = (Vec::new(), f64::INFINITY);
        for p in points {
            let d = sq_dist(x, &p);
            if d < best.1 {
                best = (p, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Anchor at rank `knn` (1-based) by distance from `x`.
    fn kth_anchor(&self, x: &[f64]) -> (usize, f64) {
        let mut d: Vec<(f64, usize)> = self
            .anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (sq_dist(x, a), i))
            .collect();
        let k = self.knn.min(d.len()) - 1;
        let (_, kth, _) = d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        (kth.1, kth.0.sqrt())
    }

    pub fn extract(&self, x: &[f64]) -> Vec<f64> {
        self.extract_with_jacobian(x, false).0
    }

    /// Statistics and, optionally, their Jacobian rows `d stat / d x`.
    pub fn extract_with_jacobian(&self, x: &[f64], jac: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let w = &self.world;
        let d = w.dim;
        let (fine, d_fine) = Self::nearest(w.fine_mode_means().into_iter().map(|m| m.2), x);
        let (class, d_class) = Self::nearest((0..w.num_classes).map(|k| w.class_mean(k)), x);
        let radius = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (kth, d_knn) = self.kth_anchor(x);
        let mut s = vec![d_fine, d_class, radius];
        s.extend((0..d).map(|c| (x[c] - fine[c]).abs()));
        s.push(d_knn);
        if !jac {
            return (s, Vec::new());
        }
        let unit = |from: &[f64], dist: f64| -> Vec<f64> {
            if dist == 0.0 {
                vec![0.0; d]
            } else {
                (0..d).map(|c| (x[c] - from[c]) / dist).collect()
            }
        };
        let mut j = vec![
            unit(&fine, d_fine),
            unit(&class, d_class),
            unit(&vec![0.0; d], radius),
        ];
        for c in 0..d {
            let mut row = vec![0.0; d];
            row[c] = (x[c] - fine[c]).signum() * if x[c] == fine[c] { 0.0 } else { 1.0 };
            j.push(row);
        }
        j.push(unit(&self.anchors[kth], d_knn));
        (s, j)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticDetector {
    pub stats: StatExtractor,
    pub norm: InputNorm,
    /// Linear head, outputs `[l_fake, l_real]`.
    pub head: Mlp64,
}

impl SemanticDetector {
    pub fn new(stats: StatExtractor, norm: InputNorm, rng: &mut Rng) -> Result<Self> {
        let head = Mlp64::new(&[stats.len(), 2], Activation::Identity, rng)?;
        Ok(SemanticDetector { stats, norm, head })
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.norm.apply(&self.stats.extract(x))
    }

    pub fn logits_from_features(&self, z: &[f64]) -> DetectorLogits {
        let w = self.head.weight(0).data();
        let b = self.head.bias(0).data();
        let n = z.len();
        let dot = |row: usize| b[row] + (0..n).map(|j| w[row * n + j] * z[j]).sum::<f64>();
        DetectorLogits {
            l_fake: dot(0),
            l_real: dot(1),
        }
    }

    pub fn logits(&self, x: &[f64]) -> DetectorLogits {
        self.logits_from_features(&self.features(x))
    }
}

impl Params<f64> for SemanticDetector {
    fn param_slices(&self) -> Vec<(String, &[f64])> {
        self.head.param_slices()
    }
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.head.param_slices_mut()
    }
    fn zeros_like(&self) -> Self {
        SemanticDetector {
            stats: self.stats.clone(),
            norm: self.norm.clone(),
            head: self.head.zeros_like(),
        }
    }
}

/// MLP over standardized coordinates producing a single fake-logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDetector {
    pub norm: InputNorm,
    pub net: Mlp64,
}

impl FeatureDetector {
    pub fn new(dim: usize, hidden: usize, norm: InputNorm, rng: &mut Rng) -> Result<Self> {
        Ok(FeatureDetector {
            norm,
            net: Mlp64::new(&[dim, hidden, hidden, 1], Activation::Relu, rng)?,
        })
    }

    pub fn fake_logit(&self, x: &[f64]) -> f64 {
        self.fake_logits(&[x])[0]
    }

    pub fn fake_logits(&self, xs: &[&[f64]]) -> Vec<f64> {
        let flat: Vec<f64> = xs.iter().flat_map(|x| self.norm.apply(x)).collect();
        self.net
            .trace(&flat, xs.len())
            .expect("frozen detector is finite on finite input")
            .into_output()
    }

    pub fn fake_probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.fake_logit(x))
    }

    pub fn real_probability(&self, x: &[f64]) -> f64 {
        1.0 - self.fake_probability(x)
    }
}

impl Params<f64> for FeatureDetector {
    fn param_slices(&self) -> Vec<(String, &[f64])> {
        self.net.param_slices()
    }
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.net.param_slices_mut()
    }
    fn zeros_like(&self) -> Self {
        FeatureDetector {
            norm: self.norm.clone(),
            net: self.net.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentClassifier {
    pub norm: InputNorm,
    pub net: Mlp64,
}

impl AlignmentClassifier {
    pub fn new(dim: usize, hidden: usize, classes: usize, norm: InputNorm, rng: &mut Rng) -> Result<Self> {
        Ok(AlignmentClassifier {
            norm,
            net: Mlp64::new(&[dim, hidden, hidden, classes], Activation::Tanh, rng)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let z = self
            .net
            .trace(&self.norm.apply(x), 1)
            .expect("frozen classifier is finite on finite input")
            .into_output();
        softmax(&z)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.probabilities(x))
    }
}

impl Params<f64> for AlignmentClassifier {
    fn param_slices(&self) -> Vec<(String, &[f64])> {
        self.net.param_slices()
    }
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.net.param_slices_mut()
    }
    fn zeros_like(&self) -> Self {
        AlignmentClassifier {
            norm: self.norm.clone(),
            net: self.net.zeros_like(),
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Probability of "real" under the semantic detector.
pub fn semantic_reward(det: &SemanticDetector, x: &Sample) -> f64 {
    real_probability(det.logits(&x.x))
}

/// `1 - P(fake)` under the feature detector.
pub fn feature_reward(det: &FeatureDetector, x: &Sample) -> f64 {
    1.0 - det.fake_probability(&x.x)
}

/// Probability that `x` shows class `k`.
pub fn alignment_reward(clf: &AlignmentClassifier, x: &Sample, k: usize) -> Result<f64> {
    if k >= clf.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {k} out of range (K = {})",
            clf.num_classes()
        )));
    }
    Ok(clf.probabilities(&x.x)[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub statistic: String,
    pub contribution: f64,
}

/// Signed contribution of each statistic to `l_fake - l_real`; they sum to
/// that gap minus the bias gap.
pub fn semantic_report(det: &SemanticDetector, x: &[f64]) -> Vec<Contribution> {
    let z = det.features(x);
    let w = det.head.weight(0).data();
    let n = z.len();
    det.stats
        .names()
        .into_iter()
        .enumerate()
        .map(|(j, statistic)| Contribution {
            statistic,
            contribution: (w[j] - w[n + j]) * z[j],
        })
        .collect()
}

pub fn report_csv(rows: &[Contribution]) -> String {
    let mut s = String::from("statistic,contribution\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.statistic, r.contribution));
    }
    s
}

/// Input gradients of each reward. Diagnostics only; GRPO never uses them.
pub mod input_grad {
    use super::*;

    pub fn semantic(det: &SemanticDetector, x: &[f64]) -> Vec<f64> {
        let (s, jac) = det.stats.extract_with_jacobian(x, true);
        let z = det.norm.apply(&s);
        let r = real_probability(det.logits_from_features(&z));
        let w = det.head.weight(0).data();
        let n = z.len();
        let mut g = vec![0.0; x.len()];
        for j in 0..n {
            let coef = r * (1.0 - r) * (w[n + j] - w[j]) / det.norm.std[j];
            for (gc, jc) in g.iter_mut().zip(&jac[j]) {
                *gc += coef * jc;
            }
        }
        g
    }

    pub fn feature(det: &FeatureDetector, x: &[f64]) -> Vec<f64> {
        let trace = det.net.trace(&det.norm.apply(x), 1).expect("finite");
        let p = sigmoid(trace.output()[0]);
        let mut scratch = det.net.zeros_like();
        let dz = det.net.backprop(&trace, &[-p * (1.0 - p)], &mut scratch).expect("finite");
        dz.iter().zip(&det.norm.std).map(|(g, s)| g / s).collect()
    }

    pub fn alignment(clf: &AlignmentClassifier, x: &[f64], k: usize) -> Vec<f64> {
        let trace = clf.net.trace(&clf.norm.apply(x), 1).expect("finite");
        let p = softmax(trace.output());
        let up: Vec<f64> = (0..p.len())
            .map(|j| p[k] * (if j == k { 1.0 } else { 0.0 } - p[j]))
            .collect();
        let mut scratch = clf.net.zeros_like();
        let dz = clf.net.backprop(&trace, &up, &mut scratch).expect("finite");
        dz.iter().zip(&clf.norm.std).map(|(g, s)| g / s).collect()
    }
}

/// Labels: `true` = generated ("fake").
pub fn feature_bce_loss_and_grad(
    det: &FeatureDetector,
    xs: &[&[f64]],
    fake: &[bool],
) -> Result<(f64, FeatureDetector)> {
    let flat: Vec<f64> = xs.iter().flat_map(|x| det.norm.apply(x)).collect();
    let trace = det.net.trace(&flat, xs.len())?;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(xs.len());
    for (&z, &y) in trace.output().iter().zip(fake) {
        let y = if y { 1.0 } else { 0.0 };
        // softplus form of binary cross-entropy on a logit
        loss += (crate::numkit::softplus(z) - y * z) / n;
        up.push((sigmoid(z) - y) / n);
    }
    let mut grads = det.zeros_like();
    det.net.backprop(&trace, &up, &mut grads.net)?;
    Ok((loss, grads))
}

/// Two-way softmax cross-entropy on precomputed standardized statistics.
pub fn semantic_ce_loss_and_grad(
    det: &SemanticDetector,
    feats: &[&[f64]],
    fake: &[bool],
) -> Result<(f64, SemanticDetector)> {
    let flat: Vec<f64> = feats.iter().flat_map(|z| z.iter().copied()).collect();
    let trace = det.head.trace(&flat, feats.len())?;
    let n = feats.len() as f64;
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(2 * feats.len());
    for (logits, &y) in trace.output().chunks(2).zip(fake) {
        let target = if y { 0 } else { 1 };
        let p = softmax(logits);
        loss -= p[target].max(f64::MIN_POSITIVE).ln() / n;
        for (j, pj) in p.iter().enumerate() {
            up.push((pj - if j == target { 1.0 } else { 0.0 }) / n);
        }
    }
    let mut grads = det.zeros_like();
    det.head.backprop(&trace, &up, &mut grads.head)?;
    Ok((loss, grads))
}

pub fn alignment_ce_loss_and_grad(
    clf: &AlignmentClassifier,
    xs: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, AlignmentClassifier)> {
    let flat: Vec<f64> = xs.iter().flat_map(|x| clf.norm.apply(x)).collect();
    let trace = clf.net.trace(&flat, xs.len())?;
    let k = clf.num_classes();
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(k * xs.len());
    for (logits, &y) in trace.output().chunks(k).zip(labels) {
        let lse = log_sum_exp(logits);
        loss += (lse - logits[y]) / n;
        for (j, z) in logits.iter().enumerate() {
            up.push(((z - lse).exp() - if j == y { 1.0 } else { 0.0 }) / n);
        }
    }
    let mut grads = clf.zeros_like();
    clf.net.backprop(&trace, &up, &mut grads.net)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub feature_hidden: usize,
    pub heldout_hidden: usize,
    pub align_hidden: usize,
    pub anchors: usize,
    pub knn: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 4000,
            batch: 128,
            lr: 3e-3,
            feature_hidden: 48,
            heldout_hidden: 96,
            align_hidden: 32,
            anchors: 512,
            knn: 5,
        }
    }
}

/// All detectors produced by one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSuite {
    pub semantic: SemanticDetector,
    pub feature: FeatureDetector,
    /// Evaluation only; never part of a reward.
    pub heldout: FeatureDetector,
    pub alignment: AlignmentClassifier,
}

impl DetectorSuite {
    pub fn reward_models(&self) -> crate::rewardcore::RewardModels<'_> {
        crate::rewardcore::RewardModels {
            semantic: &self.semantic,
            feature: &self.feature,
            alignment: &self.alignment,
        }
    }

    /// Combined hash over every detector's parameters.
    pub fn content_hash(&self) -> String {
        [
            self.semantic.content_hash(),
            self.feature.content_hash(),
            self.heldout.content_hash(),
            self.alignment.content_hash(),
        ]
        .join(":")
    }
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Balanced minibatch training of a binary detector.
fn fit_binary<D, F>(
    det: &mut D,
    real: &[&[f64]],
    fake: &[&[f64]],
    cfg: &DetectorTrainConfig,
    rng: &mut Rng,
    loss_and_grad: F,
) -> Result<()>
where
    D: Params<f64>,
    F: Fn(&D, &[&[f64]], &[bool]) -> Result<(f64, D)>,
{
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let half = (cfg.batch / 2).max(1);
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(2 * half);
        let mut ys = Vec::with_capacity(2 * half);
        for _ in 0..half {
            xs.push(real[rng.below(real.len())]);
            ys.push(false);
            xs.push(fake[rng.below(fake.len())]);
            ys.push(true);
        }
        let (loss, grads) = loss_and_grad(det, &xs, &ys)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("detector training loss".into()));
        }
        opt.step(det, &grads)?;
    }
    Ok(())
}

/// Trains the semantic, feature, held-out and alignment models.
///
/// Real and generated sets are each split into two disjoint halves: the
/// reward detectors see half A, the held-out detector half B. The alignment
/// classifier is trained on all real samples.
pub fn train_detectors(
    world: &WorldSpec,
    real: &[Sample],
    generated: &[Sample],
    cfg: &DetectorTrainConfig,
    rng: &Rng,
) -> Result<DetectorSuite> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::InvalidArgument(
            "detector training needs at least two real and two generated samples (degenerate labels)"
                .into(),
        ));
    }
    let mut split_rng = rng.child_named("split");
    let mut ri: Vec<usize> = (0..real.len()).collect();
    let mut gi: Vec<usize> = (0..generated.len()).collect();
    split_rng.shuffle(&mut ri);
    split_rng.shuffle(&mut gi);
    let (ra, rb) = ri.split_at(ri.len() / 2);
    let (ga, gb) = gi.split_at(gi.len() / 2);
    let pick = |set: &[Sample], idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| set[i].x.clone()).collect()
    };
    let (real_a, real_b) = (pick(real, ra), pick(real, rb));
    let (gen_a, gen_b) = (pick(generated, ga), pick(generated, gb));

    // semantic detector
    let n_anchor = cfg.anchors.min(real_a.len()).max(1);
    let mut anchor_idx: Vec<usize> = (0..real_a.len()).collect();
    rng.child_named("anchors").shuffle(&mut anchor_idx);
    let stats = StatExtractor {
        world: world.clone(),
        anchors: anchor_idx[..n_anchor].iter().map(|&i| real_a[i].clone()).collect(),
        knn: cfg.knn.max(1),
    };
    let s_real: Vec<Vec<f64>> = real_a.iter().map(|x| stats.extract(x)).collect();
    let s_gen: Vec<Vec<f64>> = gen_a.iter().map(|x| stats.extract(x)).collect();
    let all_stats: Vec<&[f64]> = s_real.iter().chain(&s_gen).map(Vec::as_slice).collect();
    let norm = InputNorm::fit(&all_stats);
    let z_real: Vec<Vec<f64>> = s_real.iter().map(|s| norm.apply(s)).collect();
    let z_gen: Vec<Vec<f64>> = s_gen.iter().map(|s| norm.apply(s)).collect();
    let mut semantic = SemanticDetector::new(stats, norm, &mut rng.child_named("semantic-init"))?;
    fit_binary(
        &mut semantic,
        &refs(&z_real),
        &refs(&z_gen),
        cfg,
        &mut rng.child_named("semantic-train"),
        semantic_ce_loss_and_grad,
    )?;

    let coord_norm = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let rows: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
        InputNorm::fit(&rows)
    };
    let mut feature = FeatureDetector::new(
        world.dim,
        cfg.feature_hidden,
        coord_norm(&real_a, &gen_a),
        &mut rng.child_named("feature-init"),
    )?;
    fit_binary(
        &mut feature,
        &refs(&real_a),
        &refs(&gen_a),
        cfg,
        &mut rng.child_named("feature-train"),
        feature_bce_loss_and_grad,
    )?;

    let mut heldout = FeatureDetector::new(
        world.dim,
        cfg.heldout_hidden,
        coord_norm(&real_b, &gen_b),
        &mut rng.child_named("heldout-init"),
    )?;
    fit_binary(
        &mut heldout,
        &refs(&real_b),
        &refs(&gen_b),
        cfg,
        &mut rng.child_named("heldout-train"),
        feature_bce_loss_and_grad,
    )?;

    let alignment = train_alignment(world, real, cfg, &mut rng.child_named("alignment"))?;
    Ok(DetectorSuite {
        semantic,
        feature,
        heldout,
        alignment,
    })
}

pub fn train_alignment(
    world: &WorldSpec,
    real: &[Sample],
    cfg: &DetectorTrainConfig,
    rng: &mut Rng,
) -> Result<AlignmentClassifier> {
    let rows: Vec<&[f64]> = real.iter().map(|s| s.x.as_slice()).collect();
    let mut clf = AlignmentClassifier::new(
        world.dim,
        cfg.align_hidden,
        world.num_classes,
        InputNorm::fit(&rows),
        rng,
    )?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ys = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &real[rng.below(real.len())];
            xs.push(s.x.as_slice());
            ys.push(s.class());
        }
        let (loss, grads) = alignment_ce_loss_and_grad(&clf, &xs, &ys)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("alignment training loss".into()));
        }
        opt.step(&mut clf, &grads)?;
    }
    Ok(clf)
}

/// Area under the ROC curve: probability a positive outscores a negative,
/// ties counting one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

//! Autoregressive prompt-enrichment policy.
//!
//! Position 0 always holds the user's class token. Each later position is
//! drawn from a softmax over the vocabulary given the mean embedding of the
//! prefix, a position one-hot and the user-class one-hot. Class tokens are
//! masked out after position 0, and once PAD is emitted every later position
//! is PAD with probability one (those forced positions carry log-prob 0 and
//! no gradient).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::numkit::{log_sum_exp, Activation, Adam, AdamConfig, ForwardTrace, Params, Rng};
use crate::synthworld::{PromptSeq, Token, Vocabulary, WorldSpec, T_MAX};
use crate::{Error, Mlp64, Result, Tensor64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 16,
            hidden: vec![64],
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPolicy {
    vocabulary: Vocabulary,
    /// Sampling temperature; 0 means greedy decoding.
    temperature: f64,
    #[serde(flatten)]
    net: Mlp64,
    embedding: Tensor64,
}

/// One query: the distribution at `position` given the first `position`
/// tokens of `tokens` (vocabulary indices).
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub user_class: usize,
    pub prefix: &'a [usize],
}

pub struct PolicyTrace {
    trace: ForwardTrace<f64>,
    prefixes: Vec<Vec<usize>>,
    /// Row-wise log-probabilities (masked entries are `-inf`).
    pub logprobs: Vec<Vec<f64>>,
}

impl PromptPolicy {
    pub fn new(vocabulary: Vocabulary, cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::Config("policy embed_dim must be positive".into()));
        }
        let mut sizes = vec![cfg.embed_dim + T_MAX + vocabulary.num_classes];
        sizes.extend(&cfg.hidden);
        sizes.push(vocabulary.size());
        let net = Mlp64::new(&sizes, Activation::Tanh, rng)?;
        let v = vocabulary.size();
        let embedding = Tensor64::new(vec![v, cfg.embed_dim], rng.normals(v * cfg.embed_dim))?;
        let p = PromptPolicy {
            vocabulary,
            temperature: cfg.temperature,
            net,
            embedding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn for_world(world: &WorldSpec, cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(world.vocabulary(), cfg, rng)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        let v = self.vocabulary.size();
        if self.embedding.rows() != v || self.net.output_dim() != v {
            return Err(Error::Config("policy shapes do not match vocabulary".into()));
        }
        if self.net.input_dim() != self.embedding.cols() + T_MAX + self.vocabulary.num_classes {
            return Err(Error::Config("policy encoder input width mismatch".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        self.temperature = t;
        self.validate()
    }

    /// Temperature used for log-probabilities (greedy decoding scores at 1).
    pub fn eval_temperature(&self) -> f64 {
        if self.temperature > 0.0 {
            self.temperature
        } else {
            1.0
        }
    }

    pub fn net(&self) -> &Mlp64 {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp64 {
        &mut self.net
    }

    pub fn content_hash(&self) -> String {
        Params::content_hash(self)
    }

    fn is_forced(&self, prefix: &[usize]) -> bool {
        prefix.last() == Some(&self.vocabulary.pad_index())
    }

    /// Batched log-probabilities for non-forced queries.
    pub fn trace(&self, queries: &[Query<'_>]) -> Result<PolicyTrace> {
        let e = self.embedding.cols();
        let k = self.vocabulary.num_classes;
        let width = self.net.input_dim();
        let mut input = Vec::with_capacity(queries.len() * width);
        for q in queries {
            let pos = q.prefix.len();
            if pos == 0 || pos >= T_MAX || q.user_class >= k {
                return Err(Error::InvalidArgument(format!(
                    "policy query at position {pos} for class {}",
                    q.user_class
                )));
            }
            if self.is_forced(q.prefix) {
                return Err(Error::InvalidArgument("query after PAD is forced".into()));
            }
            let mut ctx = vec![0.0; e];
            let w = 1.0 / pos as f64;
            for &r in q.prefix {
                for (c, v) in ctx.iter_mut().zip(self.embedding.row(r)) {
                    *c += w * v;
                }
            }
            input.extend(ctx);
            input.extend((0..T_MAX).map(|i| if i == pos { 1.0 } else { 0.0 }));
            input.extend((0..k).map(|i| if i == q.user_class { 1.0 } else { 0.0 }));
        }
        let trace = self.net.trace(&input, queries.len())?;
        let tau = self.eval_temperature();
        let v = self.vocabulary.size();
        let logprobs = trace
            .output()
            .chunks(v)
            .map(|z| {
                let scaled: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(i, zi)| if i < k { f64::NEG_INFINITY } else { zi / tau })
                    .collect();
                let lse = log_sum_exp(&scaled);
                scaled.iter().map(|s| s - lse).collect()
            })
            .collect();
        Ok(PolicyTrace {
            trace,
            prefixes: queries.iter().map(|q| q.prefix.to_vec()).collect(),
            logprobs,
        })
    }

    /// Accumulates gradients given `d loss / d (scaled logits)` per row.
    /// Entries for masked tokens are ignored.
    pub fn backprop(&self, pt: &PolicyTrace, upstream: &[f64], grads: &mut PromptPolicy) -> Result<()> {
        let v = self.vocabulary.size();
        let k = self.vocabulary.num_classes;
        let tau = self.eval_temperature();
        let up: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(i, g)| if i % v < k { 0.0 } else { g / tau })
            .collect();
        let dx = self.net.backprop(&pt.trace, &up, &mut grads.net)?;
        let width = self.net.input_dim();
        let e = self.embedding.cols();
        for (row, prefix) in pt.prefixes.iter().enumerate() {
            let w = 1.0 / prefix.len() as f64;
            let g = &dx[row * width..row * width + e];
            for &r in prefix {
                for (o, gv) in grads.embedding.row_mut(r).iter_mut().zip(g) {
                    *o += w * gv;
                }
            }
        }
        Ok(())
    }

    /// Full log-probability vector at the position after `prefix`.
    pub fn logprobs_at(&self, user_class: usize, prefix: &[Token]) -> Result<Vec<f64>> {
        let idx = self.indices(prefix)?;
        if self.is_forced(&idx) {
            let mut out = vec![f64::NEG_INFINITY; self.vocabulary.size()];
            out[self.vocabulary.pad_index()] = 0.0;
            return Ok(out);
        }
        let pt = self.trace(&[Query {
            user_class,
            prefix: &idx,
        }])?;
        Ok(pt.logprobs.into_iter().next().unwrap())
    }

    fn indices(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.vocabulary.index(*t)).collect()
    }
}

impl Params<f64> for PromptPolicy {
    fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut s = self.net.param_slices();
        s.push(("embedding".into(), self.embedding.data()));
        s
    }

    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut s = self.net.param_slices_mut();
        s.push(("embedding".into(), self.embedding.data_mut()));
        s
    }

    fn zeros_like(&self) -> Self {
        PromptPolicy {
            vocabulary: self.vocabulary,
            temperature: self.temperature,
            net: self.net.zeros_like(),
            embedding: Tensor64::zeros(self.embedding.shape().to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub position: usize,
    pub token: Token,
    pub logprob_old: f64,
    /// Filled by [`attach_reference`].
    pub logprob_ref: Option<f64>,
    /// Position after PAD: deterministic, excluded from gradients.
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTrajectory {
    pub user: PromptSeq,
    pub output: PromptSeq,
    /// Positions `1..T_MAX`.
    pub steps: Vec<TokenStep>,
}

impl PromptTrajectory {
    pub fn logprob_old(&self) -> f64 {
        self.steps.iter().map(|s| s.logprob_old).sum()
    }

    /// Positions that carry gradient.
    pub fn free_steps(&self) -> impl Iterator<Item = &TokenStep> {
        self.steps.iter().filter(|s| !s.forced)
    }
}

fn sample_index(logprobs: &[f64], greedy: bool, rng: &mut Rng) -> usize {
    if greedy {
        // first maximum, so ties resolve deterministically
        let mut best = 0;
        for (i, v) in logprobs.iter().enumerate() {
            if *v > logprobs[best] {
                best = i;
            }
        }
        return best;
    }
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logprobs.iter().enumerate() {
        if lp.is_finite() {
            acc += lp.exp();
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `n` enrichments of `user`; trajectory `i` draws from `rng.child(i)`.
pub fn rollout(policy: &PromptPolicy, user: &PromptSeq, n: usize, rng: &Rng) -> Result<Vec<PromptTrajectory>> {
    let users = vec![user.clone(); n];
    let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng.child(i)).collect();
    rollout_batch(policy, &users, &mut rngs)
}

/// One enrichment per user prompt, each with its own rng. Results equal
/// independent single rollouts on the same streams.
pub fn rollout_batch(policy: &PromptPolicy, users: &[PromptSeq], rngs: &mut [Rng]) -> Result<Vec<PromptTrajectory>> {
    if users.len() != rngs.len() {
        return Err(Error::Shape("one rng per user prompt".into()));
    }
    let vocab = *policy.vocabulary();
    let pad = vocab.pad_index();
    let greedy = policy.temperature() == 0.0;
    let mut seqs: Vec<Vec<usize>> = Vec::with_capacity(users.len());
    for u in users {
        u.check_vocab(&vocab)?;
        seqs.push(vec![vocab.index(u.tokens()[0])?]);
    }
    let mut steps: Vec<Vec<TokenStep>> = vec![Vec::with_capacity(T_MAX - 1); users.len()];
    for pos in 1..T_MAX {
        let live: Vec<usize> = (0..users.len()).filter(|&i| seqs[i][pos - 1] != pad).collect();
        let queries: Vec<Query> = live
            .iter()
            .map(|&i| Query {
                user_class: users[i].user_class(),
                prefix: &seqs[i],
            })
            .collect();
        let drawn: Vec<(usize, f64)> = if queries.is_empty() {
            Vec::new()
        } else {
            let pt = policy.trace(&queries)?;
            live.iter()
                .zip(&pt.logprobs)
                .map(|(&i, lp)| {
                    let j = sample_index(lp, greedy, &mut rngs[i]);
                    (j, lp[j])
                })
                .collect()
        };
        let mut d = drawn.into_iter();
        for i in 0..users.len() {
            let (idx, lp, forced) = if seqs[i][pos - 1] == pad {
                (pad, 0.0, true)
            } else {
                let (j, lp) = d.next().unwrap();
                (j, lp, false)
            };
            seqs[i].push(idx);
            steps[i].push(TokenStep {
                position: pos,
                token: vocab.token(idx)?,
                logprob_old: lp,
                logprob_ref: None,
                forced,
            });
        }
    }
    users
        .iter()
        .zip(seqs)
        .zip(steps)
        .map(|((u, s), st)| {
            let tokens = s.iter().map(|&i| vocab.token(i)).collect::<Result<Vec<_>>>()?;
            Ok(PromptTrajectory {
                user: u.clone(),
                output: PromptSeq::new(tokens)?,
                steps: st,
            })
        })
        .collect()
}

/// Greedy enrichment, independent of any rng.
pub fn greedy(policy: &PromptPolicy, user: &PromptSeq) -> Result<PromptSeq> {
    let mut p = policy.clone();
    p.temperature = 0.0;
    let t = rollout_batch(&p, std::slice::from_ref(user), &mut [Rng::new(0, 0)])?;
    Ok(t.into_iter().next().unwrap().output)
}

/// Log-probability of the recorded token at `position` under `policy`.
pub fn token_logprob(policy: &PromptPolicy, traj: &PromptTrajectory, position: usize) -> Result<f64> {
    let step = step_at(traj, position)?;
    if step.forced {
        return Ok(0.0);
    }
    let lp = policy.logprobs_at(traj.user.user_class(), &traj.output.tokens()[..position])?;
    Ok(lp[policy.vocabulary().index(step.token)?])
}

/// Like [`token_logprob`], also accumulating `scale * d logp / d theta`.
pub fn token_logprob_grad(
    policy: &PromptPolicy,
    traj: &PromptTrajectory,
    position: usize,
    scale: f64,
    grads: &mut PromptPolicy,
) -> Result<f64> {
    let step = step_at(traj, position)?;
    if step.forced {
        return Ok(0.0);
    }
    let prefix = policy.indices(&traj.output.tokens()[..position])?;
    let pt = policy.trace(&[Query {
        user_class: traj.user.user_class(),
        prefix: &prefix,
    }])?;
    let y = policy.vocabulary().index(step.token)?;
    let lp = &pt.logprobs[0];
    let up: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(i, l)| scale * (if i == y { 1.0 } else { 0.0 } - l.exp()))
        .collect();
    policy.backprop(&pt, &up, grads)?;
    Ok(lp[y])
}

fn step_at(traj: &PromptTrajectory, position: usize) -> Result<&TokenStep> {
    if position == 0 || position >= T_MAX {
        return Err(Error::InvalidArgument(format!(
            "position {position} outside generated range 1..{T_MAX}"
        )));
    }
    Ok(&traj.steps[position - 1])
}

/// Batched trace over every free position of the given trajectories.
/// Returns the trace and the `(trajectory, position)` of each row.
pub fn trace_trajectories(
    policy: &PromptPolicy,
    trajs: &[&PromptTrajectory],
) -> Result<(PolicyTrace, Vec<(usize, usize)>)> {
    let seqs = trajs
        .iter()
        .map(|t| policy.indices(t.output.tokens()))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut queries = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        for s in t.free_steps() {
            rows.push((i, s.position));
            queries.push(Query {
                user_class: t.user.user_class(),
                prefix: &seqs[i][..s.position],
            });
        }
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no free positions to score".into()));
    }
    Ok((policy.trace(&queries)?, rows))
}

/// Stores reference log-probs on every step (forced steps get 0).
pub fn attach_reference(reference: &PromptPolicy, trajs: &mut [PromptTrajectory]) -> Result<()> {
    let refs: Vec<&PromptTrajectory> = trajs.iter().collect();
    let (pt, rows) = trace_trajectories(reference, &refs)?;
    let vocab = *reference.vocabulary();
    let mut lps = Vec::with_capacity(rows.len());
    for (r, &(i, pos)) in rows.iter().enumerate() {
        let y = vocab.index(trajs[i].steps[pos - 1].token)?;
        lps.push((i, pos, pt.logprobs[r][y]));
    }
    for t in trajs.iter_mut() {
        for s in &mut t.steps {
            if s.forced {
                s.logprob_ref = Some(0.0);
            }
        }
    }
    for (i, pos, lp) in lps {
        trajs[i].steps[pos - 1].logprob_ref = Some(lp);
    }
    Ok(())
}

/// `CLS_k, SUB_m, STYLE_s, PAD...`
pub fn is_template_valid(p: &PromptSeq) -> bool {
    let t = p.tokens();
    matches!(t[1], Token::Sub(_)) && matches!(t[2], Token::Style(_)) && t[3..].iter().all(|x| *x == Token::Pad)
}

/// Enriched targets with class, sub-mode and style drawn uniformly.
pub fn template_corpus(world: &WorldSpec, n: usize, rng: &mut Rng) -> Result<Vec<PromptSeq>> {
    (0..n)
        .map(|_| {
            let k = rng.below(world.num_classes);
            let m = rng.below(world.sub_modes);
            let s = rng.below(world.style_tokens);
            world.caption(k, m, s)
        })
        .collect()
}

/// Mean token cross-entropy of the targets (free positions only) and its gradient.
pub fn sft_loss_and_grad(policy: &PromptPolicy, targets: &[&PromptSeq]) -> Result<(f64, PromptPolicy)> {
    let (pt, rows, ys) = sft_rows(policy, targets)?;
    let n = rows.len() as f64;
    let v = policy.vocabulary().size();
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(rows.len() * v);
    for (r, &y) in ys.iter().enumerate() {
        let lp = &pt.logprobs[r];
        loss -= lp[y] / n;
        up.extend(lp.iter().enumerate().map(|(i, l)| (l.exp() - if i == y { 1.0 } else { 0.0 }) / n));
    }
    let mut grads = policy.zeros_like();
    policy.backprop(&pt, &up, &mut grads)?;
    Ok((loss, grads))
}

pub fn sft_loss(policy: &PromptPolicy, targets: &[&PromptSeq]) -> Result<f64> {
    let (pt, rows, ys) = sft_rows(policy, targets)?;
    Ok(-ys.iter().enumerate().map(|(r, &y)| pt.logprobs[r][y]).sum::<f64>() / rows.len() as f64)
}

type SftRows = (PolicyTrace, Vec<(usize, usize)>, Vec<usize>);

fn sft_rows(policy: &PromptPolicy, targets: &[&PromptSeq]) -> Result<SftRows> {
    let vocab = *policy.vocabulary();
    let trajs = targets
        .iter()
        .map(|p| {
            let idx = policy.indices(p.tokens())?;
            let steps = (1..T_MAX)
                .map(|pos| TokenStep {
                    position: pos,
                    token: p.tokens()[pos],
                    logprob_old: 0.0,
                    logprob_ref: None,
                    forced: idx[pos - 1] == vocab.pad_index(),
                })
                .collect();
            Ok(PromptTrajectory {
                user: p.pass_through(),
                output: (*p).clone(),
                steps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PromptTrajectory> = trajs.iter().collect();
    let (pt, rows) = trace_trajectories(policy, &refs)?;
    let ys = rows
        .iter()
        .map(|&(i, pos)| vocab.index(trajs[i].output.tokens()[pos]))
        .collect::<Result<Vec<_>>>()?;
    Ok((pt, rows, ys))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 20,
            batch: 64,
            lr: 3e-3,
        }
    }
}

/// Cross-entropy cold start on template targets. Returns per-epoch mean loss.
pub fn sft_policy(policy: &mut PromptPolicy, corpus: &[PromptSeq], cfg: &SftConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("SFT corpus is empty".into()));
    }
    for p in corpus {
        p.check_vocab(policy.vocabulary())?;
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let targets: Vec<&PromptSeq> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, grads) = sft_loss_and_grad(policy, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("SFT loss at epoch {epoch}")));
            }
            opt.step(policy, &grads)?;
            total += loss;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDump {
    pub user_class: usize,
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

impl From<&PromptTrajectory> for PromptDump {
    fn from(t: &PromptTrajectory) -> Self {
        PromptDump {
            user_class: t.user.user_class(),
            tokens: t.output.tokens().to_vec(),
            logprobs: t.steps.iter().map(|s| s.logprob_old).collect(),
        }
    }
}

pub fn write_prompt_dumps<W: Write>(mut w: W, trajs: &[PromptTrajectory]) -> Result<()> {
    for t in trajs {
        serde_json::to_writer(&mut w, &PromptDump::from(t))?;
        w.write_all(b"\n").map_err(|e| Error::io("<prompt dump>", e))?;
    }
    Ok(())
}

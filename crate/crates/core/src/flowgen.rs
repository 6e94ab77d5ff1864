//! Conditional rectified-flow generator.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data); the network
//! regresses the straight-line velocity `x_1 - x_0`. Sampling integrates
//! with Euler steps of size `1 / T_steps`. For GRPO exploration a window of
//! consecutive steps is made stochastic with per-coordinate standard
//! deviation `sigma(t) = eta * sqrt(dt * t)`, which does not depend on the
//! parameters, so transition log-density ratios only see the Euler means.

use serde::{Deserialize, Serialize};

use crate::numkit::{Activation, Adam, AdamConfig, ForwardTrace, Params, Rng};
use crate::synthworld::{condition_rows, Origin, PromptSeq, Sample, Token, Vocabulary, WorldSpec, T_MAX};
use crate::{Error, Mlp64, Result, Tensor64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub d_cond: usize,
    pub t_steps: usize,
    pub eta: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            hidden: vec![64, 64, 64],
            d_cond: 16,
            t_steps: 20,
            eta: 0.7,
        }
    }
}

/// Velocity network plus condition embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub world: WorldSpec,
    /// Written into the origin of every generated sample.
    pub tag: String,
    #[serde(rename = "T_steps")]
    num_steps: usize,
    eta: f64,
    #[serde(flatten)]
    net: Mlp64,
    embedding_table: Tensor64,
}

/// Anything that can supply batched velocities to the Euler integrator.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// Velocities for rows `xs` (`[B, d]`) at times `ts` under prompts `conds`.
    fn velocity(&self, xs: &[f64], ts: &[f64], conds: &[&PromptSeq]) -> Result<Vec<f64>>;
}

/// Forward pass of the velocity net plus what backprop needs for the embeddings.
pub struct VelocityTrace {
    trace: ForwardTrace<f64>,
    cond_rows: Vec<Vec<(usize, f64)>>,
}

impl VelocityTrace {
    pub fn velocities(&self) -> &[f64] {
        self.trace.output()
    }
}

impl FlowModel {
    pub fn new(world: &WorldSpec, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        world.validate()?;
        if cfg.d_cond == 0 {
            return Err(Error::Config("d_cond must be positive".into()));
        }
        let mut sizes = vec![world.dim + 1 + cfg.d_cond];
        sizes.extend(&cfg.hidden);
        sizes.push(world.dim);
        let net = Mlp64::new(&sizes, Activation::Tanh, rng)?;
        let v = world.vocabulary().size();
        let table = Tensor64::new(vec![v, cfg.d_cond], rng.normals(v * cfg.d_cond))?;
        let m = FlowModel {
            world: world.clone(),
            tag: "generator".into(),
            num_steps: cfg.t_steps,
            eta: cfg.eta,
            net,
            embedding_table: table,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::Config(format!("T_steps must be >= 2, got {}", self.num_steps)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.embedding_table.rows() != self.vocab().size() {
            return Err(Error::Config(
                "embedding table rows differ from vocabulary size".into(),
            ));
        }
        let d = self.world.dim;
        if self.net.input_dim() != d + 1 + self.d_cond() || self.net.output_dim() != d {
            return Err(Error::Config("velocity net does not match world dimension".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        self.world.vocabulary()
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) -> Result<()> {
        self.eta = eta;
        self.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    pub fn d_cond(&self) -> usize {
        self.embedding_table.cols()
    }

    pub fn net(&self) -> &Mlp64 {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp64 {
        &mut self.net
    }

    pub fn embedding_table(&self) -> &Tensor64 {
        &self.embedding_table
    }

    /// Exploration noise scale for the transition leaving time `t`.
    pub fn sigma(&self, t: f64) -> f64 {
        self.eta * (self.dt() * t).sqrt()
    }

    /// Time of grid index `j` (`j = T_steps` is noise, `j = 0` is data).
    pub fn time_of(&self, j: usize) -> f64 {
        j as f64 / self.num_steps as f64
    }

    fn input_rows(
        &self,
        xs: &[f64],
        ts: &[f64],
        conds: &[&PromptSeq],
    ) -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>)> {
        let d = self.world.dim;
        let b = ts.len();
        if xs.len() != b * d || conds.len() != b {
            return Err(Error::Shape(format!(
                "velocity batch: {} coords, {} times, {} conditions",
                xs.len(),
                b,
                conds.len()
            )));
        }
        let vocab = self.vocab();
        let dc = self.d_cond();
        let mut input = Vec::with_capacity(b * (d + 1 + dc));
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            input.extend_from_slice(&xs[i * d..(i + 1) * d]);
            input.push(ts[i]);
            let cr = condition_rows(&vocab, conds[i])?;
            let mut c = vec![0.0; dc];
            for &(r, w) in &cr {
                for (o, v) in c.iter_mut().zip(self.embedding_table.row(r)) {
                    *o += w * v;
                }
            }
            input.extend(c);
            rows.push(cr);
        }
        Ok((input, rows))
    }

    pub fn velocity_trace(&self, xs: &[f64], ts: &[f64], conds: &[&PromptSeq]) -> Result<VelocityTrace> {
        let (input, cond_rows) = self.input_rows(xs, ts, conds)?;
        let trace = self.net.trace(&input, ts.len())?;
        Ok(VelocityTrace { trace, cond_rows })
    }

    /// Accumulates parameter gradients given `d loss / d velocity`.
    pub fn backprop_velocity(
        &self,
        vt: &VelocityTrace,
        upstream: &[f64],
        grads: &mut FlowModel,
    ) -> Result<()> {
        let dx = self.net.backprop(&vt.trace, upstream, &mut grads.net)?;
        let width = self.net.input_dim();
        let off = self.world.dim + 1;
        let dc = self.d_cond();
        for (i, rows) in vt.cond_rows.iter().enumerate() {
            let g = &dx[i * width + off..i * width + off + dc];
            for &(r, w) in rows {
                for (e, gv) in grads.embedding_table.row_mut(r).iter_mut().zip(g) {
                    *e += w * gv;
                }
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        Params::content_hash(self)
    }
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        self.world.dim
    }

    fn velocity(&self, xs: &[f64], ts: &[f64], conds: &[&PromptSeq]) -> Result<Vec<f64>> {
        Ok(self.velocity_trace(xs, ts, conds)?.trace.into_output())
    }
}

impl Params<f64> for FlowModel {
    fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut s = self.net.param_slices();
        s.push(("embedding_table".into(), self.embedding_table.data()));
        s
    }

    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut s = self.net.param_slices_mut();
        s.push(("embedding_table".into(), self.embedding_table.data_mut()));
        s
    }

    fn zeros_like(&self) -> Self {
        FlowModel {
            world: self.world.clone(),
            tag: self.tag.clone(),
            num_steps: self.num_steps,
            eta: self.eta,
            net: self.net.zeros_like(),
            embedding_table: Tensor64::zeros(self.embedding_table.shape().to_vec()),
        }
    }
}

/// Euler integration of a batch from grid index `from` down to `to`.
/// `on_state` sees every new state (after each step).
pub fn euler_integrate<F: VelocityField + ?Sized>(
    field: &F,
    num_steps: usize,
    xs: &mut [f64],
    conds: &[&PromptSeq],
    from: usize,
    to: usize,
    mut on_state: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let dt = 1.0 / num_steps as f64;
    let b = conds.len();
    for j in (to + 1..=from).rev() {
        let t = j as f64 / num_steps as f64;
        let v = field.velocity(xs, &vec![t; b], conds)?;
        for (x, vi) in xs.iter_mut().zip(&v) {
            *x -= dt * vi;
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {}", j - 1)));
        }
        on_state(j - 1, xs);
    }
    Ok(())
}

fn generated(model_tag: &str, x: Vec<f64>, cond: &PromptSeq) -> Sample {
    Sample {
        x,
        condition: cond.clone(),
        origin: Origin::Generated(model_tag.to_string()),
    }
}

/// Deterministic sample from `x_T ~ N(0, I)`; also returns all states
/// `x_T, ..., x_0`.
pub fn sample_ode(model: &FlowModel, cond: &PromptSeq, rng: &mut Rng) -> Result<(Sample, Vec<Vec<f64>>)> {
    let (x, states) = sample_ode_with(model, model.num_steps, cond, rng)?;
    Ok((generated(&model.tag, x, cond), states))
}

pub fn sample_ode_with<F: VelocityField + ?Sized>(
    field: &F,
    num_steps: usize,
    cond: &PromptSeq,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut x = rng.normals(field.dim());
    let mut states = vec![x.clone()];
    euler_integrate(field, num_steps, &mut x, &[cond], num_steps, 0, |_, s| {
        states.push(s.to_vec())
    })?;
    Ok((x, states))
}

/// One ODE sample per prompt; item `i` draws its noise from `rngs[i]`, so
/// the result equals calling [`sample_ode`] item by item.
pub fn sample_ode_batch(model: &FlowModel, conds: &[PromptSeq], rngs: &mut [Rng]) -> Result<Vec<Sample>> {
    if conds.len() != rngs.len() {
        return Err(Error::Shape("one rng per prompt".into()));
    }
    let d = model.world.dim;
    let mut xs: Vec<f64> = rngs.iter_mut().flat_map(|r| r.normals(d)).collect();
    let refs: Vec<&PromptSeq> = conds.iter().collect();
    let t = model.num_steps;
    euler_integrate(model, t, &mut xs, &refs, t, 0, |_, _| {})?;
    Ok(xs
        .chunks(d)
        .zip(conds)
        .map(|(x, c)| generated(&model.tag, x.to_vec(), c))
        .collect())
}

/// `log N(x; mean, sigma^2 I)`.
pub fn gaussian_logdensity(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let var = sigma * sigma;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var)
}

/// One stochastic transition inside the exploration window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStep {
    /// Grid index the transition leaves (`x_t` sits at index `step`).
    pub step: usize,
    pub t: f64,
    pub sigma: f64,
    pub x_t: Vec<f64>,
    pub mean_old: Vec<f64>,
    pub x_next: Vec<f64>,
    /// `None` when `sigma == 0` (point mass, no density).
    pub logdens_old: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// `states[i]` is the state at grid index `T_steps - i`.
    pub states: Vec<Vec<f64>>,
    pub window_start: usize,
    pub window_len: usize,
    pub window: Vec<WindowStep>,
    pub condition: PromptSeq,
    pub final_sample: Sample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdeOptions {
    /// Draw a fresh `x_T` (and prefix) per branch instead of sharing one.
    pub fresh_noise_per_branch: bool,
}

/// `n_branches` trajectories sharing a deterministic prefix down to
/// `window_start`, stochastic for `window_len` steps, then deterministic to 0.
pub fn sample_sde_window(
    model: &FlowModel,
    cond: &PromptSeq,
    window_start: usize,
    window_len: usize,
    n_branches: usize,
    rng: &mut Rng,
) -> Result<Vec<TrajectoryRecord>> {
    sample_sde_window_with(model, cond, window_start, window_len, n_branches, SdeOptions::default(), rng)
}

pub fn sample_sde_window_with(
    model: &FlowModel,
    cond: &PromptSeq,
    window_start: usize,
    window_len: usize,
    n_branches: usize,
    opts: SdeOptions,
    rng: &mut Rng,
) -> Result<Vec<TrajectoryRecord>> {
    let t_steps = model.num_steps;
    if window_len == 0 || window_start > t_steps || window_start < window_len {
        return Err(Error::Config(format!(
            "window (start {window_start}, len {window_len}) does not fit in {t_steps} steps"
        )));
    }
    if n_branches < 2 {
        return Err(Error::Config(format!("need at least 2 branches, got {n_branches}")));
    }
    let d = model.world.dim;
    let n = n_branches;
    let conds: Vec<&PromptSeq> = vec![cond; n];
    let mut branch_rngs: Vec<Rng> = (0..n as u64).map(|i| rng.child(i)).collect();

    // prefix: states[i] for grid indices T..=window_start, per branch
    let mut xs: Vec<f64>;
    let mut prefix: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    if opts.fresh_noise_per_branch {
        xs = branch_rngs.iter_mut().flat_map(|r| r.normals(d)).collect();
    } else {
        let x_t = rng.normals(d);
        xs = (0..n).flat_map(|_| x_t.iter().copied()).collect();
    }
    for (b, p) in prefix.iter_mut().enumerate() {
        p.push(xs[b * d..(b + 1) * d].to_vec());
    }
    euler_integrate(model, t_steps, &mut xs, &conds, t_steps, window_start, |_, s| {
        for (b, p) in prefix.iter_mut().enumerate() {
            p.push(s[b * d..(b + 1) * d].to_vec());
        }
    })?;

    let dt = model.dt();
    let mut windows: Vec<Vec<WindowStep>> = vec![Vec::with_capacity(window_len); n];
    for j in (window_start - window_len + 1..=window_start).rev() {
        let t = model.time_of(j);
        let sigma = model.sigma(t);
        let v = model.velocity(&xs, &vec![t; n], &conds)?;
        for b in 0..n {
            let x_t = xs[b * d..(b + 1) * d].to_vec();
            let mean: Vec<f64> = (0..d).map(|c| x_t[c] - dt * v[b * d + c]).collect();
            let x_next: Vec<f64> = if sigma == 0.0 {
                mean.clone()
            } else {
                mean.iter().map(|m| m + sigma * branch_rngs[b].normal()).collect()
            };
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sampler state at step {}", j - 1)));
            }
            let logdens_old = (sigma > 0.0).then(|| gaussian_logdensity(&x_next, &mean, sigma));
            xs[b * d..(b + 1) * d].copy_from_slice(&x_next);
            prefix[b].push(x_next.clone());
            windows[b].push(WindowStep {
                step: j,
                t,
                sigma,
                x_t,
                mean_old: mean,
                x_next,
                logdens_old,
            });
        }
    }

    let end = window_start - window_len;
    euler_integrate(model, t_steps, &mut xs, &conds, end, 0, |_, s| {
        for (b, p) in prefix.iter_mut().enumerate() {
            p.push(s[b * d..(b + 1) * d].to_vec());
        }
    })?;

    Ok(prefix
        .into_iter()
        .zip(windows)
        .enumerate()
        .map(|(b, (states, window))| TrajectoryRecord {
            states,
            window_start,
            window_len,
            window,
            condition: cond.clone(),
            final_sample: generated(&model.tag, xs[b * d..(b + 1) * d].to_vec(), cond),
        })
        .collect())
}

/// Log-density of the recorded transition under the model's current mean.
pub fn transition_logdensity(model: &FlowModel, step: &WindowStep, cond: &PromptSeq) -> Result<f64> {
    if step.sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "transition density undefined for sigma = 0 (use eta > 0)".into(),
        ));
    }
    let v = model.velocity(&step.x_t, &[step.t], &[cond])?;
    let dt = model.dt();
    let mean: Vec<f64> = step.x_t.iter().zip(&v).map(|(x, vi)| x - dt * vi).collect();
    Ok(gaussian_logdensity(&step.x_next, &mean, step.sigma))
}

/// Like [`transition_logdensity`], also accumulating `scale * d logp / d theta`
/// into `grads`.
pub fn transition_logdensity_grad(
    model: &FlowModel,
    step: &WindowStep,
    cond: &PromptSeq,
    scale: f64,
    grads: &mut FlowModel,
) -> Result<f64> {
    if step.sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "transition density undefined for sigma = 0 (use eta > 0)".into(),
        ));
    }
    let vt = model.velocity_trace(&step.x_t, &[step.t], &[cond])?;
    let dt = model.dt();
    let var = step.sigma * step.sigma;
    let mean: Vec<f64> = step
        .x_t
        .iter()
        .zip(vt.velocities())
        .map(|(x, v)| x - dt * v)
        .collect();
    // d logp / d mean = (x_next - mean) / var, d mean / d v = -dt
    let up: Vec<f64> = step
        .x_next
        .iter()
        .zip(&mean)
        .map(|(x, m)| -scale * dt * (x - m) / var)
        .collect();
    model.backprop_velocity(&vt, &up, grads)?;
    Ok(gaussian_logdensity(&step.x_next, &mean, step.sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of training on the bare class prompt.
    pub passthrough_prob: f64,
    /// Independent drop probability of each enrichment token otherwise.
    pub token_drop_prob: f64,
    /// Cosine decay of the learning rate down to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch: 256,
            lr: 2e-3,
            passthrough_prob: 0.25,
            token_drop_prob: 0.1,
            final_lr_fraction: 0.05,
        }
    }
}

/// A flow-matching minibatch: data `x0`, noise `x1`, times and prompts.
#[derive(Clone, Debug)]
pub struct FmBatch {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: Vec<f64>,
    pub conds: Vec<PromptSeq>,
}

impl FmBatch {
    pub fn draw(samples: &[&Sample], cfg: &PretrainConfig, rng: &mut Rng) -> Result<Self> {
        let d = samples[0].x.len();
        let mut b = FmBatch {
            x0: Vec::with_capacity(samples.len() * d),
            x1: Vec::with_capacity(samples.len() * d),
            t: Vec::with_capacity(samples.len()),
            conds: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            b.x0.extend_from_slice(&s.x);
            b.x1.extend(rng.normals(d));
            b.t.push(rng.uniform());
            b.conds.push(drop_caption_tokens(&s.condition, cfg, rng)?);
        }
        Ok(b)
    }
}

fn drop_caption_tokens(p: &PromptSeq, cfg: &PretrainConfig, rng: &mut Rng) -> Result<PromptSeq> {
    if rng.bernoulli(cfg.passthrough_prob) {
        return Ok(p.pass_through());
    }
    let mut kept: Vec<Token> = vec![p.tokens()[0]];
    kept.extend(
        p.tokens()[1..]
            .iter()
            .copied()
            .filter(|t| *t != Token::Pad)
            .filter(|_| !rng.bernoulli(cfg.token_drop_prob)),
    );
    kept.resize(T_MAX, Token::Pad);
    PromptSeq::new(kept)
}

fn fm_inputs(batch: &FmBatch, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xt = Vec::with_capacity(batch.x0.len());
    let mut target = Vec::with_capacity(batch.x0.len());
    for (i, &t) in batch.t.iter().enumerate() {
        for c in 0..d {
            let (a, b) = (batch.x0[i * d + c], batch.x1[i * d + c]);
            xt.push(t * b + (1.0 - t) * a);
            target.push(b - a);
        }
    }
    (xt, target)
}

/// `mean_i ||v(x_t, t, c) - (x_1 - x_0)||^2` and its parameter gradient.
pub fn fm_loss_and_grad(model: &FlowModel, batch: &FmBatch) -> Result<(f64, FlowModel)> {
    let d = model.world.dim;
    let (xt, target) = fm_inputs(batch, d);
    let conds: Vec<&PromptSeq> = batch.conds.iter().collect();
    let vt = model.velocity_trace(&xt, &batch.t, &conds)?;
    let n = batch.t.len() as f64;
    let mut loss = 0.0;
    let up: Vec<f64> = vt
        .velocities()
        .iter()
        .zip(&target)
        .map(|(v, y)| {
            loss += (v - y) * (v - y) / n;
            2.0 * (v - y) / n
        })
        .collect();
    let mut grads = model.zeros_like();
    model.backprop_velocity(&vt, &up, &mut grads)?;
    Ok((loss, grads))
}

pub fn fm_loss(model: &FlowModel, batch: &FmBatch) -> Result<f64> {
    let d = model.world.dim;
    let (xt, target) = fm_inputs(batch, d);
    let conds: Vec<&PromptSeq> = batch.conds.iter().collect();
    let v = model.velocity(&xt, &batch.t, &conds)?;
    Ok(v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / batch.t.len() as f64)
}

/// Flow-matching cold start. Returns the mean training loss of every epoch.
pub fn fm_pretrain(
    model: &mut FlowModel,
    data: &[Sample],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("flow pretraining needs real data".into()));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let per_epoch = data.len().div_ceil(cfg.batch.max(1));
    let total_steps = (per_epoch * cfg.epochs).max(1) as f64;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = FmBatch::draw(&samples, cfg, rng)?;
            let (loss, grads) = fm_loss_and_grad(model, &batch)?;
            let progress = opt.steps_taken() as f64 / total_steps;
            let floor = cfg.final_lr_fraction;
            opt.config.lr =
                cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "flow-matching loss at epoch {epoch}, batch {batches}"
                )));
            }
            opt.step(model, &grads)?;
            total += loss;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests;

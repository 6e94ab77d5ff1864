//! The stand-in for photographs and captions: a structured Gaussian mixture
//! over R^d with class / sub-mode / style annotations, and the discrete
//! prompt vocabulary shared by the prompt policy and the generator.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::numkit::Rng;
use crate::{Error, Result, Tensor64};

/// Fixed prompt length, including the leading class token.
pub const T_MAX: usize = 8;

/// Geometry of the synthetic "real" distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub sub_modes: usize,
    pub style_tokens: usize,
    pub ring_radius: f64,
    pub sub_mode_radius: f64,
    /// Per style: standard deviation along the first coordinate and along
    /// the remaining coordinates. Style 0 is the tight "camera-real" style.
    pub style_std: Vec<[f64; 2]>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            dim: 2,
            num_classes: 8,
            sub_modes: 3,
            style_tokens: 4,
            ring_radius: 4.0,
            sub_mode_radius: 0.8,
            style_std: vec![[0.05, 0.05], [0.1, 0.2], [0.2, 0.1], [0.15, 0.15]],
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("world dim must be >= 2".into()));
        }
        if self.num_classes == 0 || self.sub_modes == 0 || self.style_tokens == 0 {
            return Err(Error::Config(
                "world needs at least one class, sub-mode and style".into(),
            ));
        }
        if self.style_std.len() != self.style_tokens {
            return Err(Error::Config(format!(
                "style_std has {} entries for {} style tokens",
                self.style_std.len(),
                self.style_tokens
            )));
        }
        if self
            .style_std
            .iter()
            .flatten()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Config("style std values must be positive".into()));
        }
        if !(self.ring_radius.is_finite() && self.sub_mode_radius.is_finite()) {
            return Err(Error::Config("mode radii must be finite".into()));
        }
        let means = self.fine_mode_means();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                if sq_dist(&means[i].2, &means[j].2) < 1e-12 {
                    return Err(Error::Config(format!(
                        "fine modes {:?} and {:?} coincide",
                        (means[i].0, means[i].1),
                        (means[j].0, means[j].1)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            num_classes: self.num_classes,
            sub_modes: self.sub_modes,
            style_tokens: self.style_tokens,
        }
    }

    fn class_angle(&self, k: usize) -> f64 {
        std::f64::consts::TAU * k as f64 / self.num_classes as f64
    }

    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let a = self.class_angle(k);
        let mut mu = vec![0.0; self.dim];
        mu[0] = self.ring_radius * a.cos();
        mu[1] = self.ring_radius * a.sin();
        mu
    }

    /// Sub-mode offsets rotate with their class so every class has the same shape.
    pub fn fine_mode_mean(&self, k: usize, m: usize) -> Vec<f64> {
        let a = self.class_angle(k) + std::f64::consts::TAU * m as f64 / self.sub_modes as f64;
        let mut mu = self.class_mean(k);
        mu[0] += self.sub_mode_radius * a.cos();
        mu[1] += self.sub_mode_radius * a.sin();
        mu
    }

    /// `(class, sub_mode, mean)` for all K*M fine modes.
    pub fn fine_mode_means(&self) -> Vec<(usize, usize, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.num_classes * self.sub_modes);
        for k in 0..self.num_classes {
            for m in 0..self.sub_modes {
                out.push((k, m, self.fine_mode_mean(k, m)));
            }
        }
        out
    }

    pub fn style_sigma(&self, s: usize, coord: usize) -> f64 {
        let [first, rest] = self.style_std[s];
        if coord == 0 {
            first
        } else {
            rest
        }
    }

    /// Nearest fine mode by Euclidean distance: `(class, sub_mode, distance)`.
    pub fn nearest_fine_mode(&self, x: &[f64]) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::INFINITY);
        for k in 0..self.num_classes {
            for m in 0..self.sub_modes {
                let d = sq_dist(x, &self.fine_mode_mean(k, m));
                if d < best.2 {
                    best = (k, m, d);
                }
            }
        }
        (best.0, best.1, best.2.sqrt())
    }

    /// Full caption `[CLS_k, SUB_m, STYLE_s, PAD...]`.
    pub fn caption(&self, k: usize, m: usize, s: usize) -> Result<PromptSeq> {
        if k >= self.num_classes || m >= self.sub_modes || s >= self.style_tokens {
            return Err(Error::InvalidArgument(format!(
                "caption ({k}, {m}, {s}) outside the world"
            )));
        }
        let mut tokens = vec![Token::Pad; T_MAX];
        tokens[0] = Token::Cls(k);
        tokens[1] = Token::Sub(m);
        tokens[2] = Token::Style(s);
        PromptSeq::new(tokens)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Cls(usize),
    Sub(usize),
    Style(usize),
    Pad,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Cls(i) => write!(f, "CLS_{i}"),
            Token::Sub(i) => write!(f, "SUB_{i}"),
            Token::Style(i) => write!(f, "STYLE_{i}"),
            Token::Pad => f.write_str("PAD"),
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "PAD" {
            return Ok(Token::Pad);
        }
        let bad = || Error::InvalidArgument(format!("unknown token `{s}`"));
        let (kind, idx) = s.rsplit_once('_').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "CLS" => Ok(Token::Cls(idx)),
            "SUB" => Ok(Token::Sub(idx)),
            "STYLE" => Ok(Token::Style(idx)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Token ↔ embedding-row map: classes, then sub-modes, then styles, then PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_classes: usize,
    pub sub_modes: usize,
    pub style_tokens: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.num_classes + self.sub_modes + self.style_tokens + 1
    }

    pub fn pad_index(&self) -> usize {
        self.size() - 1
    }

    pub fn index(&self, t: Token) -> Result<usize> {
        let (k, m) = (self.num_classes, self.sub_modes);
        let out = match t {
            Token::Cls(i) if i < k => i,
            Token::Sub(i) if i < m => k + i,
            Token::Style(i) if i < self.style_tokens => k + m + i,
            Token::Pad => self.pad_index(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "token {other} outside vocabulary"
                )))
            }
        };
        Ok(out)
    }

    pub fn token(&self, idx: usize) -> Result<Token> {
        let (k, m, s) = (self.num_classes, self.sub_modes, self.style_tokens);
        match idx {
            i if i < k => Ok(Token::Cls(i)),
            i if i < k + m => Ok(Token::Sub(i - k)),
            i if i < k + m + s => Ok(Token::Style(i - k - m)),
            i if i == k + m + s => Ok(Token::Pad),
            _ => Err(Error::InvalidArgument(format!("token index {idx} out of range"))),
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        (0..self.size()).map(|i| self.token(i).unwrap()).collect()
    }
}

/// A fixed-length prompt: one class token at position 0, enrichment tokens,
/// then a PAD suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PromptSeq {
    tokens: Vec<Token>,
    user_class: usize,
}

impl PromptSeq {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() != T_MAX {
            return Err(Error::InvalidArgument(format!(
                "prompt must have {T_MAX} tokens, got {}",
                tokens.len()
            )));
        }
        let user_class = match tokens[0] {
            Token::Cls(k) => k,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "prompt must start with a class token, found {other}"
                )))
            }
        };
        if tokens[1..].iter().any(|t| matches!(t, Token::Cls(_))) {
            return Err(Error::InvalidArgument("class token after position 0".into()));
        }
        if let Some(p) = tokens.iter().position(|t| *t == Token::Pad) {
            if tokens[p..].iter().any(|t| *t != Token::Pad) {
                return Err(Error::InvalidArgument("PAD must only appear as a suffix".into()));
            }
        }
        Ok(PromptSeq { tokens, user_class })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn user_class(&self) -> usize {
        self.user_class
    }

    pub fn non_pad(&self) -> impl Iterator<Item = Token> + '_ {
        self.tokens.iter().copied().filter(|t| *t != Token::Pad)
    }

    /// The same user intent without enrichment.
    pub fn pass_through(&self) -> PromptSeq {
        let mut tokens = vec![Token::Pad; T_MAX];
        tokens[0] = Token::Cls(self.user_class);
        PromptSeq {
            tokens,
            user_class: self.user_class,
        }
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        for t in &self.tokens {
            vocab.index(*t)?;
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for PromptSeq {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<Token>,
        }
        let raw = Raw::deserialize(d)?;
        PromptSeq::new(raw.tokens).map_err(serde::de::Error::custom)
    }
}

/// The short prompt a user types: `[CLS_k, PAD x 7]`.
pub fn user_prompt(spec: &WorldSpec, k: usize) -> Result<PromptSeq> {
    if k >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {k} out of range (K = {})",
            spec.num_classes
        )));
    }
    let mut tokens = vec![Token::Pad; T_MAX];
    tokens[0] = Token::Cls(k);
    PromptSeq::new(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Generated(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Real => f.write_str("real"),
            Origin::Generated(id) => write!(f, "generated:{id}"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "real" {
            Ok(Origin::Real)
        } else if let Some(id) = s.strip_prefix("generated:") {
            Ok(Origin::Generated(id.to_string()))
        } else {
            Err(Error::InvalidArgument(format!("unknown origin `{s}`")))
        }
    }
}

/// A real or generated point together with the prompt that conditions it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SampleRecord", try_from = "SampleRecord")]
pub struct Sample {
    pub x: Vec<f64>,
    pub condition: PromptSeq,
    pub origin: Origin,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    x: Vec<f64>,
    tokens: Vec<Token>,
    origin: String,
}

impl From<Sample> for SampleRecord {
    fn from(s: Sample) -> Self {
        SampleRecord {
            x: s.x,
            tokens: s.condition.tokens,
            origin: s.origin.to_string(),
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        if r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates".into()));
        }
        Ok(Sample {
            x: r.x,
            condition: PromptSeq::new(r.tokens)?,
            origin: r.origin.parse()?,
        })
    }
}

impl Sample {
    pub fn class(&self) -> usize {
        self.condition.user_class()
    }
}

/// Draws `n` labelled points from the real mixture.
pub fn sample_real(spec: &WorldSpec, n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_real needs n >= 1".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(spec.num_classes);
        let m = rng.below(spec.sub_modes);
        let s = rng.below(spec.style_tokens);
        let mu = spec.fine_mode_mean(k, m);
        let x = (0..spec.dim)
            .map(|c| mu[c] + spec.style_sigma(s, c) * rng.normal())
            .collect();
        out.push(Sample {
            x,
            condition: spec.caption(k, m, s)?,
            origin: Origin::Real,
        });
    }
    Ok(out)
}

/// Embedding rows and mixing weights that make up a prompt's condition vector.
pub fn condition_rows(vocab: &Vocabulary, p: &PromptSeq) -> Result<Vec<(usize, f64)>> {
    let rows = p
        .non_pad()
        .map(|t| vocab.index(t))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("prompt has no non-PAD tokens".into()));
    }
    let w = 1.0 / rows.len() as f64;
    Ok(rows.into_iter().map(|r| (r, w)).collect())
}

/// Mean of the embedding rows of the prompt's non-PAD tokens.
pub fn embed_condition(vocab: &Vocabulary, table: &Tensor64, p: &PromptSeq) -> Result<Vec<f64>> {
    if table.shape().len() != 2 || table.rows() != vocab.size() {
        return Err(Error::Shape(format!(
            "embedding table {:?} does not match vocabulary of {}",
            table.shape(),
            vocab.size()
        )));
    }
    let mut out = vec![0.0; table.cols()];
    for (r, w) in condition_rows(vocab, p)? {
        for (o, v) in out.iter_mut().zip(table.row(r)) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn write_samples_jsonl<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn read_samples_jsonl<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

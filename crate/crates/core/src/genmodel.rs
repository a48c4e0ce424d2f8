//! Toy autoregressive generator.
//!
//! The next-token distribution is `softmax((W_base + s·B·A) · f(history))`,
//! where `W_base` is frozen, `f` is a fixed context encoder and the low-rank
//! pair `(A, B)` is the only trainable state. Gradients with respect to the
//! adapter are computed in closed form:
//!
//! ```text
//! G      = Σ_t (e_{y_t} − softmax(z_t)) f_tᵀ        (|V| × d)
//! ∂/∂A   = s · Bᵀ G                                 (r × d)
//! ∂/∂B   = s · G Aᵀ                                 (|V| × r)
//! ```
//!
//! Flat parameter vectors always list `A` row-major followed by `B` row-major.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::{f64_digest, sha256_hex};
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Out-of-vocabulary sentinel.
pub const UNK_TOKEN: &str = "<unk>";
/// Separator placed between a history tail and a safe text.
pub const SEPARATOR_TOKEN: &str = "⟂";

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::config("vocabulary needs at least two tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary with the unknown sentinel and separator first, followed by
    /// `words` in first-seen order with duplicates dropped.
    pub fn with_specials<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![UNK_TOKEN.to_string(), SEPARATOR_TOKEN.to_string()];
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::new(tokens).expect("specials are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.id(UNK_TOKEN)
    }

    pub fn separator_id(&self) -> Option<TokenId> {
        self.id(SEPARATOR_TOKEN)
    }

    /// Whitespace tokenization; words that miss the vocabulary are retried
    /// lower-cased with surrounding punctuation trimmed, then mapped to the
    /// unknown sentinel.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w).or_else(|| self.unk_id()).ok_or_else(|| {
                    Error::input(format!("token `{w}` not in vocabulary and no `{UNK_TOKEN}`"))
                })
            })
            .collect()
    }

    /// Like [`encode`](Self::encode) but unknown words are an error.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w)
                    .ok_or_else(|| Error::input(format!("unknown token `{w}`")))
            })
            .collect()
    }

    fn lookup(&self, word: &str) -> Option<TokenId> {
        self.id(word).or_else(|| {
            let folded = word
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            self.id(&folded)
        })
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(bad) => Err(Error::input(format!(
                "token id {bad} outside vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Deterministic context encoder standing in for a transformer trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// Concatenated one-hot encodings of the last `order` tokens; positions
    /// before the start of the history encode as zeros.
    NGram { order: usize, vocab_size: usize },
    /// Every history maps to the all-ones vector.
    Constant { dim: usize },
    /// Every history maps to the zero vector.
    Zero { dim: usize },
}

impl FeatureMap {
    pub fn ngram(order: usize, vocab_size: usize) -> Self {
        FeatureMap::NGram { order, vocab_size }
    }

    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::NGram { order, vocab_size } => order * vocab_size,
            FeatureMap::Constant { dim } | FeatureMap::Zero { dim } => dim,
        }
    }

    /// Non-zero entries of the feature vector as `(index, value)` pairs.
    pub fn active(&self, history: &[TokenId]) -> Result<Vec<(usize, f64)>> {
        match *self {
            FeatureMap::NGram { order, vocab_size } => {
                let mut out = Vec::with_capacity(order);
                for (slot, &tok) in history.iter().rev().take(order).enumerate() {
                    if tok >= vocab_size {
                        return Err(Error::input(format!(
                            "token id {tok} cannot be encoded by a {vocab_size}-token feature map"
                        )));
                    }
                    out.push((slot * vocab_size + tok, 1.0));
                }
                Ok(out)
            }
            FeatureMap::Constant { dim } => Ok((0..dim).map(|j| (j, 1.0)).collect()),
            FeatureMap::Zero { .. } => Ok(Vec::new()),
        }
    }

    pub fn dense(&self, history: &[TokenId]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        for (j, x) in self.active(history)? {
            v[j] += x;
        }
        Ok(v)
    }
}

/// Frozen output map. There is no mutable access after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    weights: Array2<f64>,
}

impl BaseParams {
    pub fn new(weights: Array2<f64>) -> Self {
        Self {
            weights: weights.as_standard_layout().into_owned(),
        }
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self::new(Array2::zeros((vocab, dim)))
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::new(Array2::from_shape_simple_fn((vocab, dim), || normal.sample(rng)))
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn checksum(&self) -> String {
        f64_digest(self.weights.as_slice().expect("standard layout"))
    }
}

/// Low-rank correction `ΔW = scale · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    a: Array2<f64>,
    b: Array2<f64>,
    scale: f64,
}

impl AdapterParams {
    pub fn new(a: Array2<f64>, b: Array2<f64>, scale: f64) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != b.ncols() {
            return Err(Error::config(format!(
                "adapter rank mismatch: A is {:?}, B is {:?}",
                a.dim(),
                b.dim()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("adapter scale must be positive"));
        }
        Ok(Self {
            a: a.as_standard_layout().into_owned(),
            b: b.as_standard_layout().into_owned(),
            scale,
        })
    }

    /// LoRA-style initialisation: `A ~ N(0, init_std²)`, `B = 0`, scale `alpha / rank`.
    /// The correction is exactly zero.
    pub fn lora_init<R: Rng + ?Sized>(
        vocab: usize,
        dim: usize,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        let normal = Normal::new(0.0, init_std)
            .map_err(|e| Error::config(format!("adapter init std: {e}")))?;
        let a = Array2::from_shape_simple_fn((rank, dim), || normal.sample(rng));
        Self::new(a, Array2::zeros((vocab, rank)), alpha / rank as f64)
    }

    pub fn zeros(vocab: usize, dim: usize, rank: usize, scale: f64) -> Result<Self> {
        Self::new(Array2::zeros((rank, dim)), Array2::zeros((vocab, rank)), scale)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn delta_weights(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }

    /// `A` row-major followed by `B` row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.a.iter());
        out.extend(self.b.iter());
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        self.check_len(values.len())?;
        let na = self.a.len();
        self.a
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&values[..na]);
        self.b
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&values[na..]);
        Ok(())
    }

    pub fn add_flat(&mut self, delta: &[f64]) -> Result<()> {
        self.check_len(delta.len())?;
        let na = self.a.len();
        for (p, d) in self.a.iter_mut().zip(&delta[..na]) {
            *p += d;
        }
        for (p, d) in self.b.iter_mut().zip(&delta[na..]) {
            *p += d;
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(Error::config(format!(
                "parameter vector has {len} entries, adapter has {}",
                self.param_count()
            )));
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        let mut v = self.flatten();
        v.push(self.scale);
        f64_digest(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub top_p: f64,
    pub tokens_per_segment: usize,
    pub rng_seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_p: 0.9,
            tokens_per_segment: 128,
            rng_seed: 0,
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.tokens_per_segment == 0 {
            return Err(Error::config("tokens_per_segment must be at least 1"));
        }
        Ok(())
    }
}

/// One conditional likelihood term: `target` scored after `context`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl TrainingExample {
    pub fn new(context: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        Self { context, target }
    }
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Frozen base + trainable adapter over a fixed vocabulary and feature map.
#[derive(Clone, Debug)]
pub struct Generator {
    vocab: Arc<Vocabulary>,
    fmap: FeatureMap,
    base: Arc<BaseParams>,
    adapter: AdapterParams,
}

impl Generator {
    pub fn new(
        vocab: Vocabulary,
        fmap: FeatureMap,
        base: BaseParams,
        adapter: AdapterParams,
    ) -> Result<Self> {
        let g = Self {
            vocab: Arc::new(vocab),
            fmap,
            base: Arc::new(base),
            adapter,
        };
        g.validate_adapter(&g.adapter)?;
        let (rows, cols) = g.base.weights.dim();
        if rows != g.vocab.len() || cols != g.fmap.dim() {
            return Err(Error::config(format!(
                "base weights are {rows}×{cols}, expected {}×{}",
                g.vocab.len(),
                g.fmap.dim()
            )));
        }
        if let FeatureMap::NGram { vocab_size, .. } = g.fmap {
            if vocab_size != g.vocab.len() {
                return Err(Error::config("feature map vocabulary size differs from vocabulary"));
            }
        }
        Ok(g)
    }

    fn validate_adapter(&self, adapter: &AdapterParams) -> Result<()> {
        if adapter.a.ncols() != self.fmap.dim() || adapter.b.nrows() != self.vocab.len() {
            return Err(Error::config(format!(
                "adapter shapes A {:?}, B {:?} do not fit |V|={} d={}",
                adapter.a.dim(),
                adapter.b.dim(),
                self.vocab.len(),
                self.fmap.dim()
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.fmap
    }

    pub fn base(&self) -> &BaseParams {
        &self.base
    }

    pub fn adapter(&self) -> &AdapterParams {
        &self.adapter
    }

    pub fn set_adapter(&mut self, adapter: AdapterParams) -> Result<()> {
        self.validate_adapter(&adapter)?;
        self.adapter = adapter;
        Ok(())
    }

    pub fn adapter_mut(&mut self) -> &mut AdapterParams {
        &mut self.adapter
    }

    /// Same base and vocabulary, different adapter.
    pub fn with_adapter(&self, adapter: AdapterParams) -> Result<Self> {
        let mut g = self.clone();
        g.set_adapter(adapter)?;
        Ok(g)
    }

    pub fn param_count(&self) -> usize {
        self.adapter.param_count()
    }

    pub fn effective_weights(&self) -> Array2<f64> {
        self.base.weights() + &self.adapter.delta_weights()
    }

    fn evaluator(&self) -> Evaluator<'_> {
        // column j of W_eff becomes contiguous row j
        let weff_t = self
            .effective_weights()
            .t()
            .as_standard_layout()
            .into_owned();
        Evaluator {
            weff_t,
            fmap: &self.fmap,
        }
    }

    pub fn logits(&self, history: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(history)?;
        self.evaluator().logits(history)
    }

    pub fn next_token_probs(&self, history: &[TokenId]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(history)?))
    }

    /// `ln p(token_i | history, sequence_<i)` for every position.
    pub fn token_log_probs(&self, history: &[TokenId], sequence: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(history)?;
        self.vocab.check(sequence)?;
        let ev = self.evaluator();
        let mut ctx = history.to_vec();
        let mut out = Vec::with_capacity(sequence.len());
        for &y in sequence {
            let lp = log_softmax(&ev.logits(&ctx)?);
            out.push(lp[y]);
            ctx.push(y);
        }
        Ok(out)
    }

    /// `1 / p(token_i | history, sequence_<i)` for every position, formed as
    /// `Σ_v exp(z_v − m) / exp(z_y − m)` so a uniform row gives `|V|` exactly.
    pub fn token_inverse_probs(&self, history: &[TokenId], sequence: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(history)?;
        self.vocab.check(sequence)?;
        let ev = self.evaluator();
        let mut ctx = history.to_vec();
        let mut out = Vec::with_capacity(sequence.len());
        for &y in sequence {
            let z = ev.logits(&ctx)?;
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|x| (x - m).exp()).sum();
            out.push(total / (z[y] - m).exp());
            ctx.push(y);
        }
        Ok(out)
    }

    pub fn sequence_log_prob(&self, history: &[TokenId], sequence: &[TokenId]) -> Result<f64> {
        Ok(self.token_log_probs(history, sequence)?.iter().sum())
    }

    /// Nucleus sampling of `tokens_per_segment` tokens continuing `history`.
    pub fn sample_segment<R: Rng + ?Sized>(
        &self,
        history: &[TokenId],
        settings: &GenerationSettings,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        settings.validate()?;
        self.vocab.check(history)?;
        let ev = self.evaluator();
        let mut ctx = history.to_vec();
        let mut out = Vec::with_capacity(settings.tokens_per_segment);
        for _ in 0..settings.tokens_per_segment {
            let z: Vec<f64> = ev
                .logits(&ctx)?
                .into_iter()
                .map(|x| x / settings.temperature)
                .collect();
            let tok = nucleus_sample(&softmax(&z), settings.top_p, rng);
            out.push(tok);
            ctx.push(tok);
        }
        Ok(out)
    }

    /// `(ln p(target | context), ∇_φ ln p(target | context))`.
    pub fn log_prob_gradient(&self, example: &TrainingExample) -> Result<(f64, Vec<f64>)> {
        self.vocab.check(&example.context)?;
        self.vocab.check(&example.target)?;
        let ev = self.evaluator();
        let mut acc = ScoreAccumulator::new(self.vocab.len(), self.fmap.dim());
        let lp = acc.add(&ev, example, 1.0)?;
        Ok((lp, acc.into_adapter_gradient(&self.adapter)))
    }

    /// `−(1/m) Σ_j ∇_φ ln p(target_j | context_j)` over a non-empty batch.
    pub fn adapter_gradient(&self, batch: &[TrainingExample]) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(batch)?.1)
    }

    /// Mean negative log-likelihood of the batch together with its gradient.
    pub fn loss_and_gradient(&self, batch: &[TrainingExample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::input("gradient requested for an empty batch"));
        }
        let ev = self.evaluator();
        let mut acc = ScoreAccumulator::new(self.vocab.len(), self.fmap.dim());
        let w = -1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            self.vocab.check(&ex.context)?;
            self.vocab.check(&ex.target)?;
            loss += w * acc.add(&ev, ex, w)?;
        }
        Ok((loss, acc.into_adapter_gradient(&self.adapter)))
    }

    /// Mean negative log-likelihood of the batch.
    pub fn batch_loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("loss requested for an empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            total -= self.sequence_log_prob(&ex.context, &ex.target)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Average feature vector over every prefix of `tokens`.
    pub fn mean_pooled_embedding(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(tokens)?;
        let mut v = vec![0.0; self.fmap.dim()];
        if tokens.is_empty() {
            return Ok(v);
        }
        for t in 1..=tokens.len() {
            for (j, x) in self.fmap.active(&tokens[..t])? {
                v[j] += x;
            }
        }
        let n = tokens.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }

    /// Digest over vocabulary, feature map, base weights and adapter.
    pub fn digest(&self) -> String {
        let parts = [
            sha256_hex(self.vocab.tokens.join("\u{1f}").as_bytes()),
            sha256_hex(serde_json::to_string(&self.fmap).unwrap_or_default().as_bytes()),
            self.base.checksum(),
            self.adapter.checksum(),
        ];
        sha256_hex(parts.join(":").as_bytes())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocabulary: self.vocab.tokens.clone(),
            feature_map: self.fmap.clone(),
            dim: self.fmap.dim(),
            rank: self.adapter.rank(),
            scale: self.adapter.scale,
            base: self.base.weights.clone(),
            adapter_a: self.adapter.a.clone(),
            adapter_b: self.adapter.b.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                what: "model checkpoint".into(),
                expected: CHECKPOINT_FORMAT_VERSION,
                found: ck.format_version,
            });
        }
        if ck.feature_map.dim() != ck.dim || ck.adapter_a.nrows() != ck.rank {
            return Err(Error::config("checkpoint header disagrees with its arrays"));
        }
        Self::new(
            Vocabulary::new(ck.vocabulary)?,
            ck.feature_map,
            BaseParams::new(ck.base),
            AdapterParams::new(ck.adapter_a, ck.adapter_b, ck.scale)?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// Self-describing model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocabulary: Vec<String>,
    pub feature_map: FeatureMap,
    pub dim: usize,
    pub rank: usize,
    pub scale: f64,
    pub base: Array2<f64>,
    pub adapter_a: Array2<f64>,
    pub adapter_b: Array2<f64>,
}

struct Evaluator<'a> {
    weff_t: Array2<f64>,
    fmap: &'a FeatureMap,
}

impl Evaluator<'_> {
    fn logits(&self, history: &[TokenId]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.weff_t.ncols()];
        for (j, x) in self.fmap.active(history)? {
            let col: ArrayView1<f64> = self.weff_t.row(j);
            for (zi, w) in z.iter_mut().zip(col.iter()) {
                *zi += x * w;
            }
        }
        Ok(z)
    }
}

/// Accumulates `Gᵀ = Σ w · f (e_y − p)ᵀ` (d × |V|) over scored tokens.
struct ScoreAccumulator {
    g_t: Array2<f64>,
}

impl ScoreAccumulator {
    fn new(vocab: usize, dim: usize) -> Self {
        Self {
            g_t: Array2::zeros((dim, vocab)),
        }
    }

    fn add(&mut self, ev: &Evaluator<'_>, ex: &TrainingExample, weight: f64) -> Result<f64> {
        let mut ctx = ex.context.clone();
        let mut lp_total = 0.0;
        for &y in &ex.target {
            let active = ev.fmap.active(&ctx)?;
            let mut z = vec![0.0; self.g_t.ncols()];
            for &(j, x) in &active {
                for (zi, w) in z.iter_mut().zip(ev.weff_t.row(j).iter()) {
                    *zi += x * w;
                }
            }
            let lp = log_softmax(&z);
            lp_total += lp[y];
            for &(j, x) in &active {
                let mut row = self.g_t.row_mut(j);
                for (k, g) in row.iter_mut().enumerate() {
                    let resid = if k == y { 1.0 } else { 0.0 } - lp[k].exp();
                    *g += weight * x * resid;
                }
            }
            ctx.push(y);
        }
        Ok(lp_total)
    }

    fn into_adapter_gradient(self, adapter: &AdapterParams) -> Vec<f64> {
        let s = adapter.scale;
        // ∂/∂A = s·Bᵀ G = s·(Gᵀ B)ᵀ ; ∂/∂B = s·G Aᵀ = s·(A Gᵀ)ᵀ
        let grad_a = self.g_t.dot(&adapter.b).reversed_axes() * s;
        let grad_b = adapter.a.dot(&self.g_t).reversed_axes() * s;
        let mut out = Vec::with_capacity(grad_a.len() + grad_b.len());
        out.extend(grad_a.as_standard_layout().iter());
        out.extend(grad_b.as_standard_layout().iter());
        out
    }
}

/// Keeps the smallest probability-sorted prefix with mass ≥ `top_p`,
/// renormalises and draws one index.
pub fn nucleus_sample<R: Rng + ?Sized>(probs: &[f64], top_p: f64, rng: &mut R) -> TokenId {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &order[..kept] {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    order[kept - 1]
}

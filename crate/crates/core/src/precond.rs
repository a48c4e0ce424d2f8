//! Offline diagonal Fisher estimation and the damped preconditioner
//! `P_i = 1 / (Ī_i + λ)`.
//!
//! The estimate is taken once at the episode-initial adapter on a reference
//! corpus and reused by every episode. [`estimation_count`] exposes how many
//! estimates the current thread has run, so callers can check that no
//! estimation happens inside the adaptation loop.

use std::cell::Cell;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{f64_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::genmodel::{Generator, GenerationSettings, TokenId, TrainingExample};

pub const PRECONDITIONER_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DAMPING: f64 = 1e-4;
/// Largest sequence space [`exact_fisher_diag`] will enumerate per context.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

thread_local! {
    static ESTIMATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Fisher estimations started on this thread.
pub fn estimation_count() -> u64 {
    ESTIMATIONS.with(Cell::get)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Reference corpus: token sequences used as conditioning contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCorpus {
    pub id: String,
    pub texts: Vec<Vec<TokenId>>,
}

impl ReferenceCorpus {
    pub fn new(texts: Vec<Vec<TokenId>>) -> Self {
        let flat: Vec<String> = texts
            .iter()
            .map(|t| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        let id = sha256_hex(flat.join("\n").as_bytes());
        Self { id, texts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Continuations sampled from the model: `y ~ p(·|x)`.
    True,
    /// Corpus texts used as the scored sequence (empirical Fisher).
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub continuation_len: usize,
    pub mode: FisherMode,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            batch_size: 2,
            continuation_len: 128,
            mode: FisherMode::True,
            seed: 0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagEstimate {
    /// `Ī_i`: mean squared log-likelihood gradient.
    pub values: Vec<f64>,
    /// Sample variance of the squared gradients, per parameter.
    pub square_variance: Vec<f64>,
    pub sample_count: usize,
    pub corpus_id: String,
    pub model_digest: String,
    pub steps: usize,
    pub batch_size: usize,
    pub continuation_len: usize,
    pub mode: FisherMode,
}

impl FisherDiagEstimate {
    /// Standard error of each `Ī_i`.
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.sample_count as f64;
        self.square_variance.iter().map(|v| (v / n).sqrt()).collect()
    }

    pub fn digest(&self) -> String {
        f64_digest(&self.values)
    }
}

/// Estimates `Ī_i = E_{x, y~p(·|x)} [(∂_i ln p(y|x))²]` from `steps` batches.
///
/// Each step owns an rng stream derived from `(seed, step)`; steps run in
/// parallel and are reduced in step order, so the result does not depend on
/// the worker count.
pub fn estimate_diag_fisher(
    model: &Generator,
    corpus: &ReferenceCorpus,
    cfg: &FisherConfig,
) -> Result<FisherDiagEstimate> {
    ESTIMATIONS.with(|c| c.set(c.get() + 1));
    if corpus.texts.is_empty() {
        return Err(Error::Estimation("reference corpus is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Estimation("steps and batch size must be positive".into()));
    }
    let settings = GenerationSettings {
        temperature: cfg.temperature,
        top_p: 1.0,
        tokens_per_segment: cfg.continuation_len.max(1),
        rng_seed: cfg.seed,
    };
    let n = model.param_count();

    let per_step: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>>> = (0..cfg.steps)
        .into_par_iter()
        .map(|step| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(step as u64);
            let mut out = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let x = &corpus.texts[rng.random_range(0..corpus.texts.len())];
                let example = match cfg.mode {
                    FisherMode::True => {
                        let y = model.sample_segment(x, &settings, &mut rng)?;
                        TrainingExample::new(x.clone(), y)
                    }
                    FisherMode::Empirical => TrainingExample::new(Vec::new(), x.clone()),
                };
                let (_, g) = model.log_prob_gradient(&example)?;
                let sq: Vec<f64> = g.iter().map(|v| v * v).collect();
                let quad: Vec<f64> = sq.iter().map(|v| v * v).collect();
                out.push((sq, quad));
            }
            Ok(out)
        })
        .collect();

    let mut s1 = vec![CompensatedSum::default(); n];
    let mut s2 = vec![CompensatedSum::default(); n];
    let mut count = 0usize;
    for step in per_step {
        for (sq, quad) in step? {
            for i in 0..n {
                s1[i].add(sq[i]);
                s2[i].add(quad[i]);
            }
            count += 1;
        }
    }
    let c = count as f64;
    let values: Vec<f64> = s1.iter().map(|s| s.value() / c).collect();
    let square_variance = s2
        .iter()
        .zip(&values)
        .map(|(s, m)| {
            if count > 1 {
                ((s.value() / c - m * m) * c / (c - 1.0)).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(FisherDiagEstimate {
        values,
        square_variance,
        sample_count: count,
        corpus_id: corpus.id.clone(),
        model_digest: model.digest(),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        continuation_len: cfg.continuation_len,
        mode: cfg.mode,
    })
}

/// Exact Fisher diagonals by enumerating every continuation of length `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactFisher {
    pub per_context: Vec<Vec<f64>>,
    /// Average over contexts.
    pub mean: Vec<f64>,
}

/// Per-parameter variance of the score function under `p(·|x)` for each
/// context, by full enumeration. A test oracle, not used on the main path.
pub fn exact_fisher_diag(
    model: &Generator,
    contexts: &[Vec<TokenId>],
    len: usize,
) -> Result<ExactFisher> {
    let v = model.vocab().len();
    let space = (0..len).try_fold(1usize, |acc, _| acc.checked_mul(v));
    let space = match space {
        Some(s) if s <= ENUMERATION_BUDGET => s,
        _ => {
            return Err(Error::Oracle(format!(
                "|V|^T = {v}^{len} exceeds the enumeration budget {ENUMERATION_BUDGET}"
            )))
        }
    };
    if contexts.is_empty() {
        return Err(Error::Oracle("no contexts to enumerate".into()));
    }
    let n = model.param_count();
    let per_context: Vec<Vec<f64>> = contexts
        .iter()
        .map(|x| {
            let mut first = vec![0.0; n];
            let mut second = vec![0.0; n];
            let mut y = vec![0usize; len];
            for code in 0..space {
                let mut c = code;
                for slot in y.iter_mut() {
                    *slot = c % v;
                    c /= v;
                }
                let (lp, g) = model.log_prob_gradient(&TrainingExample::new(x.clone(), y.clone()))?;
                let p = lp.exp();
                for i in 0..n {
                    first[i] += p * g[i];
                    second[i] += p * g[i] * g[i];
                }
            }
            Ok(second
                .iter()
                .zip(&first)
                .map(|(s, f)| (s - f * f).max(0.0))
                .collect())
        })
        .collect::<Result<_>>()?;
    let k = per_context.len() as f64;
    let mean = (0..n)
        .map(|i| per_context.iter().map(|f| f[i]).sum::<f64>() / k)
        .collect();
    Ok(ExactFisher { per_context, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionerHeader {
    pub format_version: u32,
    pub n: usize,
    pub damping: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub sample_count: usize,
    pub continuation_len: usize,
    pub mode: FisherMode,
    pub corpus_digest: String,
    pub model_digest: String,
    pub estimate_digest: String,
}

/// Damped reciprocal of a diagonal Fisher estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preconditioner {
    pub header: PreconditionerHeader,
    pub diag: Vec<f64>,
}

/// `P_i = 1 / (Ī_i + λ)`.
pub fn build_preconditioner(estimate: &FisherDiagEstimate, damping: f64) -> Result<Preconditioner> {
    if !(damping > 0.0 && damping.is_finite()) {
        return Err(Error::config(format!("damping must be positive, got {damping}")));
    }
    if estimate.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Numeric("Fisher estimate has negative or non-finite entries".into()));
    }
    Ok(Preconditioner {
        header: PreconditionerHeader {
            format_version: PRECONDITIONER_FORMAT_VERSION,
            n: estimate.values.len(),
            damping,
            steps: estimate.steps,
            batch_size: estimate.batch_size,
            sample_count: estimate.sample_count,
            continuation_len: estimate.continuation_len,
            mode: estimate.mode,
            corpus_digest: estimate.corpus_id.clone(),
            model_digest: estimate.model_digest.clone(),
            estimate_digest: estimate.digest(),
        },
        diag: estimate.values.iter().map(|f| 1.0 / (f + damping)).collect(),
    })
}

impl Preconditioner {
    /// All-ones diagonal: reduces a preconditioned step to plain SGD.
    pub fn identity(n: usize) -> Self {
        Self {
            header: PreconditionerHeader {
                format_version: PRECONDITIONER_FORMAT_VERSION,
                n,
                damping: 1.0,
                steps: 0,
                batch_size: 0,
                sample_count: 0,
                continuation_len: 0,
                mode: FisherMode::True,
                corpus_digest: String::new(),
                model_digest: String::new(),
                estimate_digest: String::new(),
            },
            diag: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Preconditioner = serde_json::from_str(&fs::read_to_string(path)?)?;
        if p.header.format_version != PRECONDITIONER_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                what: "preconditioner".into(),
                expected: PRECONDITIONER_FORMAT_VERSION,
                found: p.header.format_version,
            });
        }
        if p.header.n != p.diag.len() {
            return Err(Error::config("preconditioner header length disagrees with diagonal"));
        }
        Ok(p)
    }

    /// Rejects an artifact estimated for a different model.
    pub fn verify_model(&self, model: &Generator) -> Result<()> {
        let digest = model.digest();
        if self.header.model_digest != digest {
            return Err(Error::DigestMismatch {
                what: "preconditioner model".into(),
                expected: digest,
                found: self.header.model_digest.clone(),
            });
        }
        if self.diag.len() != model.param_count() {
            return Err(Error::config("preconditioner size does not match adapter"));
        }
        Ok(())
    }

    pub fn load_verified(path: &Path, model: &Generator) -> Result<Self> {
        let p = Self::load(path)?;
        p.verify_model(model)?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityViolation {
    pub context: usize,
    pub param: usize,
    /// `I(φ₀; x)_i / Ī_i`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rho: f64,
    pub contexts: usize,
    pub contexts_holding: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub violations: Vec<StabilityViolation>,
}

impl StabilityReport {
    pub fn fraction_holding(&self) -> f64 {
        if self.contexts == 0 {
            return 0.0;
        }
        self.contexts_holding as f64 / self.contexts as f64
    }

    pub fn holds(&self, required_fraction: f64) -> bool {
        self.fraction_holding() >= required_fraction
    }
}

/// Checks `(1−ρ)·Ī ≤ I(φ₀; x) ≤ (1+ρ)·Ī` entrywise for each context, over
/// the coordinates in `subspace` (all coordinates when `None`).
pub fn check_fisher_stability(
    reference: &[f64],
    per_context: &[Vec<f64>],
    rho: f64,
    subspace: Option<&[usize]>,
) -> StabilityReport {
    let all: Vec<usize> = (0..reference.len()).collect();
    let coords = subspace.unwrap_or(&all);
    let mut report = StabilityReport {
        rho,
        contexts: per_context.len(),
        contexts_holding: 0,
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        violations: Vec::new(),
    };
    for (c, fisher) in per_context.iter().enumerate() {
        let mut ok = true;
        for &i in coords {
            let (lo, hi) = ((1.0 - rho) * reference[i], (1.0 + rho) * reference[i]);
            let ratio = if reference[i] > 0.0 {
                fisher[i] / reference[i]
            } else if fisher[i] == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            report.min_ratio = report.min_ratio.min(ratio);
            report.max_ratio = report.max_ratio.max(ratio);
            if fisher[i] < lo || fisher[i] > hi {
                ok = false;
                if report.violations.len() < 64 {
                    report.violations.push(StabilityViolation {
                        context: c,
                        param: i,
                        ratio,
                    });
                }
            }
        }
        if ok {
            report.contexts_holding += 1;
        }
    }
    report
}

/// Preconditioners keyed by `(model digest, corpus id)`; each pair is
/// estimated at most once.
#[derive(Debug, Default)]
pub struct PreconditionerCache {
    entries: HashMap<(String, String), Preconditioner>,
    estimations: u64,
}

impl PreconditionerCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn estimations(&self) -> u64 {
        self.estimations
    }

    pub fn get_or_estimate(
        &mut self,
        model: &Generator,
        corpus: &ReferenceCorpus,
        cfg: &FisherConfig,
        damping: f64,
    ) -> Result<&Preconditioner> {
        let key = (model.digest(), corpus.id.clone());
        if !self.entries.contains_key(&key) {
            let est = estimate_diag_fisher(model, corpus, cfg)?;
            self.estimations += 1;
            self.entries.insert(key.clone(), build_preconditioner(&est, damping)?);
        }
        Ok(&self.entries[&key])
    }
}

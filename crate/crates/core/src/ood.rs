//! Embedding-space out-of-distribution detectors and their evaluation.
//!
//! Scores are oriented so that larger means further from the reference set.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{Generator, TokenId};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const FAR_OOD_AUROC: f64 = 0.95;
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLabel {
    Reference,
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbeddingHeader {
    format_version: u32,
    dim: usize,
    count: usize,
    source: String,
    label: EmbeddingLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub source: String,
    pub label: EmbeddingLabel,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(source: impl Into<String>, label: EmbeddingLabel, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::input("embedding vectors differ in dimension"));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::input("embedding contains non-finite entries"));
        }
        Ok(Self {
            source: source.into(),
            label,
            dim,
            vectors,
        })
    }

    /// Mean-pooled feature vectors of each token sequence under `model`.
    pub fn from_model(
        source: impl Into<String>,
        label: EmbeddingLabel,
        model: &Generator,
        texts: &[Vec<TokenId>],
    ) -> Result<Self> {
        let vectors = texts
            .iter()
            .map(|t| model.mean_pooled_embedding(t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(source, label, vectors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// JSON header line, then one whitespace-separated vector per line.
    pub fn to_file_string(&self) -> String {
        let header = EmbeddingHeader {
            format_version: EMBEDDING_FORMAT_VERSION,
            dim: self.dim,
            count: self.vectors.len(),
            source: self.source.clone(),
            label: self.label,
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for v in &self.vectors {
            let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(source: &str) -> Result<Self> {
        let mut lines = source.lines().filter(|l| !l.trim().is_empty());
        let header: EmbeddingHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::input("embedding file is empty"))?,
        )?;
        if header.format_version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                what: "embedding file".into(),
                expected: EMBEDDING_FORMAT_VERSION,
                found: header.format_version,
            });
        }
        let vectors = lines
            .map(|l| {
                l.split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|e| Error::input(format!("bad float `{x}`: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if vectors.len() != header.count {
            return Err(Error::input(format!(
                "header announces {} vectors, found {}",
                header.count,
                vectors.len()
            )));
        }
        let set = Self::new(header.source, header.label, vectors)?;
        if !set.is_empty() && set.dim != header.dim {
            return Err(Error::input("header dimension disagrees with vectors"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance from `query` to its `k`-th nearest reference vector.
pub fn knn_score(query: &[f64], reference: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 || k > reference.len() {
        return Err(Error::config(format!(
            "k = {k} needs between 1 and {} reference vectors",
            reference.len()
        )));
    }
    let mut d: Vec<f64> = reference.iter().map(|r| euclidean(query, r)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Gaussian fit of the reference set with a shrunk, pre-factored covariance.
#[derive(Clone, Debug)]
pub struct MahalanobisModel {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub shrinkage: f64,
}

impl MahalanobisModel {
    /// `shrinkage = None` uses `γ = 10⁻³ · tr(Σ) / dim`.
    pub fn fit(reference: &[Vec<f64>], shrinkage: Option<f64>) -> Result<Self> {
        let n = reference.len();
        if n == 0 {
            return Err(Error::input("empty reference set"));
        }
        let dim = reference[0].len();
        let mut mean = DVector::zeros(dim);
        for r in reference {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for r in reference {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        let gamma = shrinkage.unwrap_or_else(|| 1e-3 * cov.trace() / dim as f64);
        Self::from_moments(mean, cov, gamma)
    }

    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let dim = mean.len();
        let reg = cov + DMatrix::identity(dim, dim) * gamma;
        let chol = reg
            .cholesky()
            .ok_or_else(|| Error::Numeric("regularised covariance is not positive definite".into()))?;
        Ok(Self {
            mean,
            chol,
            shrinkage: gamma,
        })
    }

    pub fn score(&self, query: &[f64]) -> f64 {
        let c = DVector::from_column_slice(query) - &self.mean;
        let z = self.chol.solve(&c);
        c.dot(&z).max(0.0).sqrt()
    }
}

/// `sqrt((x−μ)ᵀ(Σ+γI)⁻¹(x−μ))`.
pub fn mahalanobis_score(query: &[f64], mean: &[f64], cov: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    Ok(MahalanobisModel::from_moments(DVector::from_column_slice(mean), cov.clone(), gamma)?.score(query))
}

/// `ln p_bg(text) − ln p_fg(text)`.
pub fn llr_score(tokens: &[TokenId], foreground: &Generator, background: &Generator) -> Result<f64> {
    Ok(background.sequence_log_prob(&[], tokens)? - foreground.sequence_log_prob(&[], tokens)?)
}

/// Probability that a random OOD score exceeds a random ID score, ties ½,
/// computed from mid-ranks.
pub fn auroc(scores_ood: &[f64], scores_id: &[f64]) -> f64 {
    let n1 = scores_ood.len();
    let n0 = scores_id.len();
    let mut all: Vec<(f64, bool)> = scores_ood
        .iter()
        .map(|s| (*s, true))
        .chain(scores_id.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    (rank_sum - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 as f64 * n0 as f64)
}

/// Average precision with OOD as the positive class; tied scores enter as one
/// threshold.
pub fn aupr(scores_ood: &[f64], scores_id: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = scores_ood
        .iter()
        .map(|s| (*s, true))
        .chain(scores_id.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = scores_ood.len() as f64;
    let (mut tp, mut seen, mut ap) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let group_tp = all[i..=j].iter().filter(|x| x.1).count() as f64;
        tp += group_tp;
        seen += (j - i + 1) as f64;
        ap += (group_tp / positives) * (tp / seen);
        i = j + 1;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub detector: String,
    pub scores_ood: Vec<f64>,
    pub scores_id: Vec<f64>,
    pub auroc: f64,
    pub aupr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub far_ood: bool,
}

impl DetectorResult {
    pub fn ci_covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// AUROC, AUPR and a stratified percentile-bootstrap 95% interval for AUROC.
/// Each resample draws from its own stream of a seed taken from `rng`.
pub fn evaluate<R: Rng + ?Sized>(
    detector: &str,
    scores_ood: &[f64],
    scores_id: &[f64],
    bootstrap_n: usize,
    rng: &mut R,
) -> Result<DetectorResult> {
    if scores_ood.is_empty() || scores_id.is_empty() {
        return Err(Error::input("both score sets must be non-empty"));
    }
    if scores_ood.iter().chain(scores_id).any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    let seed: u64 = rng.random();
    let value = auroc(scores_ood, scores_id);
    let mut boots: Vec<f64> = (0..bootstrap_n)
        .into_par_iter()
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            let o: Vec<f64> = (0..scores_ood.len())
                .map(|_| scores_ood[r.random_range(0..scores_ood.len())])
                .collect();
            let d: Vec<f64> = (0..scores_id.len())
                .map(|_| scores_id[r.random_range(0..scores_id.len())])
                .collect();
            auroc(&o, &d)
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = if boots.is_empty() {
        (value, value)
    } else {
        (percentile(&boots, 0.025), percentile(&boots, 0.975))
    };
    Ok(DetectorResult {
        detector: detector.to_string(),
        scores_ood: scores_ood.to_vec(),
        scores_id: scores_id.to_vec(),
        auroc: value,
        aupr: aupr(scores_ood, scores_id),
        ci_low,
        ci_high,
        resamples: bootstrap_n,
        far_ood: value > FAR_OOD_AUROC,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Knn,
    Mahalanobis,
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::Knn => "knn",
            Detector::Mahalanobis => "mahalanobis",
        })
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Detector::Knn),
            "mahalanobis" => Ok(Detector::Mahalanobis),
            other => Err(Error::config(format!("unknown detector `{other}`"))),
        }
    }
}

/// Scores every item of `id` and `ood` against `reference` with `detector`.
pub fn score_sets(
    detector: Detector,
    reference: &EmbeddingSet,
    id: &EmbeddingSet,
    ood: &EmbeddingSet,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if id.dim() != reference.dim() || ood.dim() != reference.dim() {
        return Err(Error::input("embedding sets differ in dimension"));
    }
    match detector {
        Detector::Knn => {
            let f = |set: &EmbeddingSet| {
                set.vectors()
                    .par_iter()
                    .map(|q| knn_score(q, reference.vectors(), k))
                    .collect::<Result<Vec<f64>>>()
            };
            Ok((f(ood)?, f(id)?))
        }
        Detector::Mahalanobis => {
            let m = MahalanobisModel::fit(reference.vectors(), None)?;
            let f = |set: &EmbeddingSet| set.vectors().iter().map(|q| m.score(q)).collect::<Vec<f64>>();
            Ok((f(ood), f(id)))
        }
    }
}

//! Evaluation formulas: perplexity, fluency, difference-in-differences with a
//! paired t-test, Fleiss' kappa, and run-level summaries of episode records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::genmodel::{Generator, TokenId};
use crate::scoring::Committee;
use crate::tta::EpisodeRecord;

/// `exp(−mean ln p)`; `+∞` when any token has probability zero.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::input("perplexity of an empty sequence"));
    }
    if log_probs.iter().any(|l| *l == f64::NEG_INFINITY) {
        return Ok(f64::INFINITY);
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Geometric mean of per-token inverse probabilities, taken relative to the
/// first so that a constant sequence returns that constant exactly.
pub fn perplexity_from_inverse_probs(inverse: &[f64]) -> Result<f64> {
    let Some(&first) = inverse.first() else {
        return Err(Error::input("perplexity of an empty sequence"));
    };
    if inverse.iter().any(|x| x.is_infinite()) {
        return Ok(f64::INFINITY);
    }
    let mean_log = inverse.iter().map(|x| (x / first).ln()).sum::<f64>() / inverse.len() as f64;
    Ok(first * mean_log.exp())
}

/// Perplexity of `sequence` under `evaluator`, conditioned on `history`.
pub fn perplexity(evaluator: &Generator, history: &[TokenId], sequence: &[TokenId]) -> Result<f64> {
    perplexity_from_inverse_probs(&evaluator.token_inverse_probs(history, sequence)?)
}

/// `1 / (1 + ln ppl)`; an infinite perplexity maps to 0.
pub fn fluency(ppl: f64) -> Result<f64> {
    if !(ppl >= 1.0) {
        return Err(Error::input(format!("fluency needs ppl ≥ 1, got {ppl}")));
    }
    Ok(1.0 / (1.0 + ppl.ln()))
}

/// `(P_j − P_0) − (B_j − B_0)`, or `None` when a segment is missing.
pub fn did(system: &[f64], baseline: &[f64], j: usize) -> Option<f64> {
    Some((system.get(j)? - system.first()?) - (baseline.get(j)? - baseline.first()?))
}

/// Paired DiD values across prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DidSample {
    pub segment: usize,
    pub differences: Vec<f64>,
    pub excluded: usize,
}

pub fn did_paired(pairs: &[(Vec<f64>, Vec<f64>)], j: usize) -> DidSample {
    let mut differences = Vec::with_capacity(pairs.len());
    let mut excluded = 0;
    for (p, b) in pairs {
        match did(p, b, j) {
            Some(d) => differences.push(d),
            None => excluded += 1,
        }
    }
    DidSample {
        segment: j,
        differences,
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub p: Option<f64>,
}

impl TTest {
    pub fn degenerate(&self) -> bool {
        self.t.is_none()
    }
}

/// Two-sided one-sample t-test of the differences against 0 with `n − 1`
/// degrees of freedom.
pub fn paired_t_test(differences: &[f64]) -> Result<TTest> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::input("a paired t-test needs at least two differences"));
    }
    let mean = differences.iter().sum::<f64>() / n as f64;
    let var = differences.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(TTest {
            n,
            mean,
            sd,
            t: None,
            p: None,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok(TTest {
        n,
        mean,
        sd,
        t: Some(t),
        p: Some(p.min(1.0)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub p_bar: f64,
    pub p_e: f64,
    /// `None` when every rating falls in one category.
    pub kappa: Option<f64>,
}

/// Fleiss' kappa over items × raters; every item needs the same number of
/// ratings.
pub fn fleiss_kappa<T: Ord>(ratings: &[Vec<T>]) -> Result<Kappa> {
    if ratings.len() < 2 {
        return Err(Error::input("Fleiss' kappa needs at least two items"));
    }
    let n = ratings[0].len();
    if n < 2 || ratings.iter().any(|r| r.len() != n) {
        return Err(Error::input("every item needs the same number (≥ 2) of ratings"));
    }
    let mut totals: BTreeMap<&T, usize> = BTreeMap::new();
    let mut p_sum = 0.0;
    for item in ratings {
        let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
        for r in item {
            *counts.entry(r).or_default() += 1;
            *totals.entry(r).or_default() += 1;
        }
        let agree: usize = counts.values().map(|c| c * (c - 1)).sum();
        p_sum += agree as f64 / (n * (n - 1)) as f64;
    }
    let items = ratings.len() as f64;
    let p_bar = p_sum / items;
    let all = items * n as f64;
    let p_e: f64 = totals.values().map(|c| (*c as f64 / all).powi(2)).sum();
    let kappa = (p_e < 1.0).then(|| (p_bar - p_e) / (1.0 - p_e));
    Ok(Kappa { p_bar, p_e, kappa })
}

/// Per-prompt evaluation of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub prompt_id: String,
    /// Evaluator perplexity of the full generated continuation.
    pub ppl: f64,
    pub fluency: f64,
    /// Report-committee mean per segment.
    pub segment_bias: Vec<f64>,
    pub bias: f64,
    pub trigger_rate: f64,
    pub update_time_s: f64,
    pub test_time_s: f64,
}

/// Scores an episode with the report committee and the held-out evaluator.
pub fn evaluate_episode(record: &EpisodeRecord, evaluator: &Generator, report: &Committee) -> Result<EpisodeMetrics> {
    let vocab = evaluator.vocab();
    let prompt = vocab.encode(&record.prompt)?;
    let mut generated = Vec::new();
    let mut segment_bias = Vec::with_capacity(record.segments.len());
    for s in &record.segments {
        generated.extend(vocab.encode(&s.text)?);
        segment_bias.push(report.score(&s.text)?);
    }
    let ppl = perplexity(evaluator, &prompt, &generated)?;
    let fl = if ppl.is_finite() { fluency(ppl)? } else { 0.0 };
    Ok(EpisodeMetrics {
        prompt_id: record.prompt_id.clone(),
        ppl,
        fluency: fl,
        bias: mean(&segment_bias),
        segment_bias,
        trigger_rate: record.trigger_rate,
        update_time_s: record.update_time_s,
        test_time_s: record.update_time_s + record.generation_time_s,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values);
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean: m, sd }
    }
}

/// One summary row: PPL, Fluency, BB Bias, trigger rate, Update (s), Test (s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub prompts: usize,
    pub ppl: MeanSd,
    pub fluency: MeanSd,
    pub bb_bias: MeanSd,
    pub trigger_rate: MeanSd,
    pub update_s: MeanSd,
    /// Per-prompt total of update and generation time.
    pub test_s: MeanSd,
    /// Prompts whose perplexity was infinite; excluded from the PPL column.
    pub infinite_ppl: usize,
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "system",
    "n",
    "PPL",
    "Fluency",
    "BB Bias",
    "Trigger rate",
    "Update (s)",
    "Test (s, per prompt)",
];

/// Mean and standard deviation across prompts. Fluency is averaged per
/// sample, not recomputed from the mean perplexity.
pub fn aggregate_run(system: &str, metrics: &[EpisodeMetrics]) -> Result<SummaryRow> {
    if metrics.is_empty() {
        return Err(Error::input("no episodes to aggregate"));
    }
    let col = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).collect::<Vec<f64>>();
    let finite_ppl: Vec<f64> = metrics.iter().map(|m| m.ppl).filter(|p| p.is_finite()).collect();
    Ok(SummaryRow {
        system: system.to_string(),
        prompts: metrics.len(),
        ppl: MeanSd::of(&finite_ppl),
        fluency: MeanSd::of(&col(|m| m.fluency)),
        bb_bias: MeanSd::of(&col(|m| m.bias)),
        trigger_rate: MeanSd::of(&col(|m| m.trigger_rate)),
        update_s: MeanSd::of(&col(|m| m.update_time_s)),
        test_s: MeanSd::of(&col(|m| m.test_time_s)),
        infinite_ppl: metrics.len() - finite_ppl.len(),
    })
}

impl SummaryRow {
    /// Tab-separated `mean±sd` cells at four decimals.
    pub fn to_tsv(&self) -> String {
        let cell = |m: &MeanSd| format!("{:.4}±{:.4}", m.mean, m.sd);
        [
            self.system.clone(),
            self.prompts.to_string(),
            cell(&self.ppl),
            cell(&self.fluency),
            cell(&self.bb_bias),
            cell(&self.trigger_rate),
            cell(&self.update_s),
            cell(&self.test_s),
        ]
        .join("\t")
    }

    /// Same content as [`SummaryRow::to_tsv`], as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        let cell = |m: &MeanSd| {
            serde_json::json!({
                "mean": format!("{:.4}", m.mean),
                "sd": format!("{:.4}", m.sd),
            })
        };
        serde_json::json!({
            "system": self.system,
            "n": self.prompts,
            "ppl": cell(&self.ppl),
            "fluency": cell(&self.fluency),
            "bb_bias": cell(&self.bb_bias),
            "trigger_rate": cell(&self.trigger_rate),
            "update_s": cell(&self.update_s),
            "test_s_per_prompt": cell(&self.test_s),
            "infinite_ppl": self.infinite_ppl,
        })
    }
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = SUMMARY_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_tsv());
    }
    out
}

/// Empirical CDF points `(x, F(x))` at each distinct value.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => out.push((*x, f)),
        }
    }
    out
}

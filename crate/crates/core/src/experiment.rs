//! Running one system over a prompt set.
//!
//! Every prompt gets its own seed and starts from `φ₀`, so results do not
//! depend on the number of worker threads or on scheduling order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::Generator;
use crate::metrics::{evaluate_episode, EpisodeMetrics};
use crate::scoring::Committee;
use crate::tta::{
    episode_seed, reset_episode, run_episode, should_trigger, static_episode, AdaptiveModel, EpisodeConfig,
    EpisodeEnv, EpisodeRecord, Prompt,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Frozen generator, no scoring.
    Static,
    /// Triggered test-time adaptation with the configured update rule.
    Adaptive,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(RunMode::Static),
            "adaptive" | "captta" => Ok(RunMode::Adaptive),
            other => Err(Error::config(format!("unknown run mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub prompt_id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// In prompt order, failed prompts omitted.
    pub records: Vec<EpisodeRecord>,
    pub failures: Vec<RunFailure>,
}

impl RunOutcome {
    pub fn failure_fraction(&self) -> f64 {
        let total = self.records.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))
}

/// Runs every prompt as an independent episode on `jobs` threads.
pub fn run_prompts(
    prompts: &[Prompt],
    model: &Generator,
    env: &EpisodeEnv<'_>,
    config: &EpisodeConfig,
    mode: RunMode,
    master_seed: u64,
    jobs: usize,
) -> Result<RunOutcome> {
    config.validate()?;
    let results: Vec<Result<EpisodeRecord>> = pool(jobs)?.install(|| {
        prompts
            .par_iter()
            .map_init(
                || AdaptiveModel::new(model.clone(), config.update.clone()),
                |session, prompt| {
                    let seed = episode_seed(master_seed, &prompt.id);
                    match mode {
                        RunMode::Static => static_episode(prompt, model, config, seed),
                        RunMode::Adaptive => {
                            let session = session.as_mut().map_err(|e| Error::config(e.to_string()))?;
                            let out = run_episode(prompt, session, env, config, seed);
                            reset_episode(session);
                            out
                        }
                    }
                },
            )
            .collect()
    });
    let mut outcome = RunOutcome::default();
    for (prompt, result) in prompts.iter().zip(results) {
        match result {
            Ok(record) => outcome.records.push(record),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => outcome.failures.push(RunFailure {
                prompt_id: prompt.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}

/// Per-episode metrics in record order.
pub fn evaluate_records(
    records: &[EpisodeRecord],
    evaluator: &Generator,
    report: &Committee,
    jobs: usize,
) -> Result<Vec<EpisodeMetrics>> {
    pool(jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| evaluate_episode(r, evaluator, report))
            .collect()
    })
}

/// Trigger-committee score of every segment of frozen trajectories.
pub fn frozen_scores(records: &[EpisodeRecord], trigger: &Committee) -> Result<Vec<f64>> {
    records
        .iter()
        .flat_map(|r| r.segments.iter())
        .map(|s| trigger.score(&s.text))
        .collect()
}

/// Fraction of frozen segments that would trigger at `epsilon`.
pub fn frozen_trigger_rate(scores: &[f64], epsilon: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| should_trigger(s, epsilon)).count() as f64 / scores.len() as f64
}

//! Episodic, segment-wise generation with threshold-triggered adapter updates.
//!
//! An episode generates `K` segments. After each segment the trigger
//! committee scores it; when the mean exceeds `ε` the router picks the
//! dominant bias type, a safe batch is drawn from that bucket, aligned with
//! the history and used for a few update-rule steps. The next segment is
//! generated by the adapted model. Between episodes the adapter is restored
//! to `φ₀`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::genmodel::{AdapterParams, GenerationSettings, Generator, TokenId, TrainingExample};
use crate::optim::{norm, UpdateKind, UpdateRuleConfig, Updater};
use crate::precond::Preconditioner;
use crate::safebank::{context_align, SafeBank, DEFAULT_MAX_LEN_UPDATE};
use crate::scoring::{score_report, BiasType, Committee, Routing, TypeRouter};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CONTINUATION_MARKER: &str = "[Continue the story]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub segments: usize,
    pub epsilon: f64,
    /// Safe batch size `m`.
    pub batch_size: usize,
    /// Run one update round per triggered type instead of the dominant one only.
    pub multi_trigger: bool,
    /// Appended to the history before every segment after the first.
    pub continuation_marker: String,
    /// History tokens kept when aligning a safe text.
    pub max_len_update: usize,
    pub generation: GenerationSettings,
    pub update: UpdateRuleConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            epsilon: 0.3,
            batch_size: 2,
            multi_trigger: false,
            continuation_marker: DEFAULT_CONTINUATION_MARKER.to_string(),
            max_len_update: DEFAULT_MAX_LEN_UPDATE,
            generation: GenerationSettings::default(),
            update: UpdateRuleConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::config("an episode needs at least one segment"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("ε must lie in [0, 1], got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("safe batch size must be at least 1"));
        }
        self.generation.validate()?;
        self.update.validate()
    }
}

/// `s > ε`.
pub fn should_trigger(score: f64, epsilon: f64) -> bool {
    score > epsilon
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Seed for one episode, fixed by the run seed and the prompt id alone.
pub fn episode_seed(master_seed: u64, prompt_id: &str) -> u64 {
    let h = sha256_hex(format!("{master_seed}\u{0}{prompt_id}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn episode_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut generation = ChaCha8Rng::seed_from_u64(seed);
    generation.set_stream(0);
    let mut bank = ChaCha8Rng::seed_from_u64(seed);
    bank.set_stream(1);
    (generation, bank)
}

/// Generator plus its episode-initial adapter and optimiser state.
#[derive(Clone, Debug)]
pub struct AdaptiveModel {
    model: Generator,
    phi0: AdapterParams,
    phi0_checksum: String,
    updater: Updater,
}

impl AdaptiveModel {
    /// The model's current adapter becomes `φ₀`.
    pub fn new(model: Generator, update: UpdateRuleConfig) -> Result<Self> {
        let phi0 = model.adapter().clone();
        let updater = Updater::new(update, model.param_count())?;
        Ok(Self {
            phi0_checksum: phi0.checksum(),
            phi0,
            model,
            updater,
        })
    }

    pub fn model(&self) -> &Generator {
        &self.model
    }

    pub fn phi0(&self) -> &AdapterParams {
        &self.phi0
    }

    pub fn phi0_checksum(&self) -> &str {
        &self.phi0_checksum
    }

    pub fn at_phi0(&self) -> bool {
        self.model.adapter().checksum() == self.phi0_checksum
    }

    pub fn drift(&self) -> f64 {
        let now = self.model.adapter().flatten();
        let start = self.phi0.flatten();
        norm(&now.iter().zip(&start).map(|(a, b)| a - b).collect::<Vec<_>>())
    }

    fn set_update_config(&mut self, update: &UpdateRuleConfig) -> Result<()> {
        if self.updater.config() != update {
            self.updater = Updater::new(update.clone(), self.model.param_count())?;
        }
        Ok(())
    }
}

/// `φ ← φ₀` bit-exactly and optimiser state cleared.
pub fn reset_episode(session: &mut AdaptiveModel) {
    session.model.set_adapter(session.phi0.clone()).expect("φ₀ matches the model");
    session.updater.reset();
}

/// Shared read-only state of a run. Only the trigger committee is reachable
/// from here; report scorers are never passed to an episode.
pub struct EpisodeEnv<'a> {
    pub trigger: &'a Committee,
    pub router: &'a TypeRouter,
    pub bank: &'a SafeBank,
    pub preconditioner: &'a Preconditioner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentFlag {
    ScorerFailure { message: String },
    BankUnavailable { bias_type: BiasType, message: String },
    GenericFallback { bias_type: BiasType, count: usize },
}

/// One update round: the safe batch it used and the per-step norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRound {
    pub bias_type: BiasType,
    pub safe_texts: Vec<String>,
    pub grad_norms: Vec<f64>,
    pub delta_norms: Vec<f64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub text: String,
    /// Committee mean `s_k`; absent when scoring failed.
    pub trigger_score: Option<f64>,
    pub triggered: bool,
    pub routing: Option<Routing>,
    pub rounds: Vec<UpdateRound>,
    /// `‖φ − φ₀‖` after this segment's updates.
    pub drift: f64,
    pub flags: Vec<SegmentFlag>,
    pub generation_s: f64,
    pub update_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub prompt_id: String,
    pub prompt: String,
    pub seed: u64,
    /// `None` for a static run.
    pub epsilon: Option<f64>,
    pub rule: UpdateKind,
    pub max_delta_norm: Option<f64>,
    pub steps_per_round: usize,
    pub segments: Vec<SegmentRecord>,
    pub trigger_rate: f64,
    pub update_time_s: f64,
    pub generation_time_s: f64,
    pub phi0_checksum: String,
    pub final_checksum: String,
}

impl EpisodeRecord {
    pub fn trigger_count(&self) -> usize {
        self.segments.iter().filter(|s| s.triggered).count()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Digest of everything except wall-clock timings.
    pub fn content_digest(&self) -> String {
        let mut r = self.clone();
        r.update_time_s = 0.0;
        r.generation_time_s = 0.0;
        for s in &mut r.segments {
            s.generation_s = 0.0;
            s.update_s = 0.0;
        }
        sha256_hex(serde_json::to_string(&r).expect("record serialises").as_bytes())
    }
}

/// Encodes the prompt and generates `K` segments with the static model; no
/// scorer is consulted.
pub fn static_episode(
    prompt: &Prompt,
    model: &Generator,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeRecord> {
    config.validate()?;
    let (mut gen_rng, _) = episode_streams(seed);
    let vocab = model.vocab();
    let marker = vocab.encode(&config.continuation_marker)?;
    let mut history = vocab.encode(&prompt.text)?;
    let mut segments = Vec::with_capacity(config.segments);
    let mut gen_total = 0.0;
    for k in 0..config.segments {
        if k > 0 {
            history.extend(&marker);
        }
        let t = Instant::now();
        let seg = model.sample_segment(&history, &config.generation, &mut gen_rng)?;
        let elapsed = t.elapsed().as_secs_f64();
        gen_total += elapsed;
        segments.push(SegmentRecord {
            index: k,
            text: vocab.decode(&seg),
            trigger_score: None,
            triggered: false,
            routing: None,
            rounds: Vec::new(),
            drift: 0.0,
            flags: Vec::new(),
            generation_s: elapsed,
            update_s: 0.0,
        });
        history.extend(seg);
    }
    let checksum = model.adapter().checksum();
    Ok(EpisodeRecord {
        schema_version: EPISODE_SCHEMA_VERSION,
        prompt_id: prompt.id.clone(),
        prompt: prompt.text.clone(),
        seed,
        epsilon: None,
        rule: config.update.kind,
        max_delta_norm: config.update.max_delta_norm,
        steps_per_round: 0,
        segments,
        trigger_rate: 0.0,
        update_time_s: 0.0,
        generation_time_s: gen_total,
        phi0_checksum: checksum.clone(),
        final_checksum: checksum,
    })
}

/// Runs one episode from `φ₀`. The session is left at the episode's final
/// adapter; call [`reset_episode`] before the next one.
pub fn run_episode(
    prompt: &Prompt,
    session: &mut AdaptiveModel,
    env: &EpisodeEnv<'_>,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeRecord> {
    config.validate()?;
    session.set_update_config(&config.update)?;
    if !session.at_phi0() {
        return Err(Error::Adaptation("episode must start from φ₀".into()));
    }
    if env.preconditioner.len() != session.model.param_count() {
        return Err(Error::config("preconditioner size does not match adapter"));
    }
    if config.update.kind == UpdateKind::Precond && !env.preconditioner.header.model_digest.is_empty() {
        env.preconditioner.verify_model(&session.model)?;
    }
    let (mut gen_rng, mut bank_rng) = episode_streams(seed);
    let marker = session.model.vocab().encode(&config.continuation_marker)?;
    let mut history = session.model.vocab().encode(&prompt.text)?;
    let mut segments = Vec::with_capacity(config.segments);

    for k in 0..config.segments {
        if k > 0 {
            history.extend(&marker);
        }
        let t = Instant::now();
        let seg = session
            .model
            .sample_segment(&history, &config.generation, &mut gen_rng)?;
        let generation_s = t.elapsed().as_secs_f64();
        let text = session.model.vocab().decode(&seg);

        let mut flags = Vec::new();
        let (trigger_score, routing) = match score_report(&text, env.trigger, env.router, config.epsilon) {
            Ok(r) => (Some(r.committee_mean), Some(r.routing)),
            Err(e) => {
                log::warn!("prompt {}: segment {k} scoring failed: {e}", prompt.id);
                flags.push(SegmentFlag::ScorerFailure { message: e.to_string() });
                (None, None)
            }
        };
        let triggered = trigger_score.is_some_and(|s| should_trigger(s, config.epsilon));

        let t = Instant::now();
        let mut rounds = Vec::new();
        if triggered {
            let routing = routing.as_ref().expect("scored segment has routing");
            let types: Vec<BiasType> = if config.multi_trigger && !routing.triggered.is_empty() {
                routing.triggered.clone()
            } else {
                vec![routing.dominant]
            };
            for ty in types {
                match update_round(session, env, config, &history, ty, &mut bank_rng, &mut flags)? {
                    Some(round) => rounds.push(round),
                    None => continue,
                }
            }
        }
        let update_s = t.elapsed().as_secs_f64();

        segments.push(SegmentRecord {
            index: k,
            text,
            trigger_score,
            triggered,
            routing,
            rounds,
            drift: session.drift(),
            flags,
            generation_s,
            update_s,
        });
        history.extend(seg);
    }

    let triggers = segments.iter().filter(|s| s.triggered).count();
    Ok(EpisodeRecord {
        schema_version: EPISODE_SCHEMA_VERSION,
        prompt_id: prompt.id.clone(),
        prompt: prompt.text.clone(),
        seed,
        epsilon: Some(config.epsilon),
        rule: config.update.kind,
        max_delta_norm: config.update.max_delta_norm,
        steps_per_round: config.update.steps,
        trigger_rate: triggers as f64 / config.segments as f64,
        update_time_s: segments.iter().map(|s| s.update_s).sum(),
        generation_time_s: segments.iter().map(|s| s.generation_s).sum(),
        segments,
        phi0_checksum: session.phi0_checksum.clone(),
        final_checksum: session.model.adapter().checksum(),
    })
}

fn update_round(
    session: &mut AdaptiveModel,
    env: &EpisodeEnv<'_>,
    config: &EpisodeConfig,
    history: &[TokenId],
    ty: BiasType,
    rng: &mut ChaCha8Rng,
    flags: &mut Vec<SegmentFlag>,
) -> Result<Option<UpdateRound>> {
    let batch = match env.bank.sample_batch(ty, config.batch_size, rng) {
        Ok(b) => b,
        Err(Error::Adaptation(message)) => {
            log::warn!("update for `{ty}` skipped: {message}");
            flags.push(SegmentFlag::BankUnavailable { bias_type: ty, message });
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    if batch.fallback > 0 {
        flags.push(SegmentFlag::GenericFallback {
            bias_type: ty,
            count: batch.fallback,
        });
    }
    let examples: Vec<TrainingExample> = batch
        .entries
        .iter()
        .map(|e| {
            context_align(
                session.model.vocab(),
                history,
                &e.text,
                config.max_len_update,
                config.update.precond_max,
            )
            .map(|a| a.to_example())
        })
        .collect::<Result<_>>()?;

    let upd = &config.update;
    let phi0 = session.phi0.flatten();
    let mut round = UpdateRound {
        bias_type: ty,
        safe_texts: batch.entries.iter().map(|e| e.text.clone()).collect(),
        grad_norms: Vec::with_capacity(upd.steps),
        delta_norms: Vec::with_capacity(upd.steps),
        losses: Vec::with_capacity(upd.steps),
    };
    let mut pending = vec![0.0; phi0.len()];
    let mut buffered = 0;
    for _ in 0..upd.steps {
        let phi = session.model.adapter().flatten();
        let (loss, mut grad) = session.model.loss_and_gradient(&examples)?;
        if upd.reg_enabled && upd.lambda_reg > 0.0 {
            for ((g, p), p0) in grad.iter_mut().zip(&phi).zip(&phi0) {
                *g += upd.lambda_reg * (p - p0);
            }
        }
        let step = session.updater.step(&phi, &grad, env.preconditioner)?;
        round.grad_norms.push(step.grad_norm);
        round.delta_norms.push(norm(&step.delta));
        round.losses.push(loss);
        for (a, d) in pending.iter_mut().zip(&step.delta) {
            *a += d;
        }
        buffered += 1;
        if buffered == upd.flush_every {
            session.model.adapter_mut().add_flat(&pending)?;
            pending.iter_mut().for_each(|x| *x = 0.0);
            buffered = 0;
        }
    }
    if buffered > 0 {
        session.model.adapter_mut().add_flat(&pending)?;
    }
    Ok(Some(round))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `‖φ_K − φ₀‖₂`.
    pub final_drift: f64,
    /// Sum of per-step update norms.
    pub total_step_norm: f64,
    pub triggers: usize,
    pub update_steps: usize,
    /// `max_delta_norm × update steps` when capping is on.
    pub cap_bound: Option<f64>,
}

impl DriftReport {
    /// Both sides of the triangle inequality, with slack for rounding.
    pub fn inequality_holds(&self) -> bool {
        let tol = 1e-12 * (1.0 + self.total_step_norm);
        self.final_drift <= self.total_step_norm + tol
            && self.cap_bound.is_none_or(|b| self.total_step_norm <= b + tol)
    }
}

pub fn drift_report(record: &EpisodeRecord) -> DriftReport {
    let steps: Vec<f64> = record
        .segments
        .iter()
        .flat_map(|s| s.rounds.iter().flat_map(|r| r.delta_norms.iter().copied()))
        .collect();
    DriftReport {
        final_drift: record.segments.last().map_or(0.0, |s| s.drift),
        total_step_norm: steps.iter().sum(),
        triggers: record.trigger_count(),
        update_steps: steps.len(),
        cap_bound: record.max_delta_norm.map(|c| c * steps.len() as f64),
    }
}

pub fn write_records(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != EPISODE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                what: "episode record".into(),
                expected: EPISODE_SCHEMA_VERSION,
                found,
            });
        }
        records.push(serde_json::from_value(value)?);
    }
    Ok(records)
}

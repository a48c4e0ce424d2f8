//! Experiment configuration: one TOML document, unknown keys rejected.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use captta::experiment::RunMode;
use captta::precond::FisherMode;
use captta::scoring::{Committee, LexiconScorer, PluginClient, PluginScorer, Scorer, TypeRouter};
use captta::tta::{EpisodeConfig, Prompt};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Label of the system in summary tables.
    #[serde(default = "default_system")]
    pub system: String,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// A run exits with code 4 when more than this fraction of episodes fail.
    #[serde(default)]
    pub max_failure_fraction: f64,
    pub artifacts: Artifacts,
    pub prompts: PromptSpec,
    pub scorers: ScorerSpec,
    #[serde(default)]
    pub fisher: FisherSpec,
    #[serde(default)]
    pub episode: EpisodeConfig,
}

fn default_system() -> String {
    "captta".into()
}

fn default_mode() -> RunMode {
    RunMode::Adaptive
}

fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    pub model: PathBuf,
    /// Held-out model used for perplexity.
    pub evaluator: PathBuf,
    pub bank: PathBuf,
    pub preconditioner: PathBuf,
    /// One reference text per line, for Fisher estimation.
    pub reference: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    /// Tab-separated `id<TAB>text` lines.
    pub path: PathBuf,
    /// Keep prompts whose report-committee score is at least this.
    #[serde(default = "default_filter")]
    pub filter: f64,
    #[serde(default = "default_sample")]
    pub sample: usize,
}

fn default_filter() -> f64 {
    0.4
}

fn default_sample() -> usize {
    300
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ScorerEntry {
    Lexicon {
        id: String,
        path: PathBuf,
    },
    /// One field of a line-delimited JSON scorer process.
    Plugin {
        id: String,
        command: String,
        #[serde(default)]
        args: Vec<String>,
        field: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum RouterSpec {
    CommitteeGated {
        race: PathBuf,
        sex: PathBuf,
        religion: PathBuf,
    },
    PerType {
        race: ScorerEntry,
        sex: ScorerEntry,
        religion: ScorerEntry,
        other: ScorerEntry,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub trigger: Vec<ScorerEntry>,
    pub report: Vec<ScorerEntry>,
    pub router: RouterSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub continuation_len: usize,
    pub damping: f64,
    pub mode: FisherMode,
    pub seed: u64,
}

impl Default for FisherSpec {
    fn default() -> Self {
        let f = captta::precond::FisherConfig::default();
        Self {
            steps: f.steps,
            batch_size: f.batch_size,
            continuation_len: f.continuation_len,
            damping: 1e-4,
            mode: f.mode,
            seed: f.seed,
        }
    }
}

impl FisherSpec {
    pub fn fisher_config(&self) -> captta::precond::FisherConfig {
        captta::precond::FisherConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            continuation_len: self.continuation_len,
            mode: self.mode,
            seed: self.seed,
            ..captta::precond::FisherConfig::default()
        }
    }
}

/// Parses `text`, applies `key.path=value` overrides and resolves relative
/// paths against `base`.
pub fn parse_config(text: &str, overrides: &[String], base: &Path) -> Result<ExperimentConfig, CliError> {
    let mut doc: toml::Table = text.parse().map_err(|e| CliError::config(format!("invalid config: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("invalid config: {e}")))?;
    cfg.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, overrides, base)
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve_path(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_entry(base: &Path, e: &mut ScorerEntry) {
    if let ScorerEntry::Lexicon { path, .. } = e {
        resolve_path(base, path);
    }
}

impl ExperimentConfig {
    fn resolve(&mut self, base: &Path) {
        resolve_path(base, &mut self.output_dir);
        let a = &mut self.artifacts;
        for p in [&mut a.model, &mut a.evaluator, &mut a.bank, &mut a.preconditioner, &mut a.reference] {
            resolve_path(base, p);
        }
        resolve_path(base, &mut self.prompts.path);
        for e in self.scorers.trigger.iter_mut().chain(self.scorers.report.iter_mut()) {
            resolve_entry(base, e);
        }
        match &mut self.scorers.router {
            RouterSpec::CommitteeGated { race, sex, religion } => {
                for p in [race, sex, religion] {
                    resolve_path(base, p);
                }
            }
            RouterSpec::PerType { race, sex, religion, other } => {
                for e in [race, sex, religion, other] {
                    resolve_entry(base, e);
                }
            }
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.episode.validate().map_err(CliError::from)?;
        if self.jobs == 0 {
            return Err(CliError::config("jobs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(CliError::config("max_failure_fraction must lie in [0, 1]"));
        }
        if self.scorers.trigger.is_empty() || self.scorers.report.is_empty() {
            return Err(CliError::config("trigger and report committees need at least one scorer"));
        }
        if !(self.fisher.damping > 0.0) {
            return Err(CliError::config("fisher.damping must be positive"));
        }
        Ok(())
    }

    /// Fails with the offending path when an input file is missing.
    pub fn require_files(&self, paths: &[&Path]) -> Result<(), CliError> {
        for p in paths {
            if !p.is_file() {
                return Err(CliError::config(format!("missing file: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Canonical JSON digest of the resolved configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        captta::digest::sha256_hex(json.as_bytes())
    }
}

/// Builds committees and router, sharing one process per plugin command.
pub struct ScorerFactory {
    clients: HashMap<(String, Vec<String>), Arc<PluginClient>>,
}

impl ScorerFactory {
    pub fn new() -> Self {
        Self { clients: HashMap::new() }
    }

    pub fn scorer(&mut self, entry: &ScorerEntry) -> Result<Arc<dyn Scorer>, CliError> {
        match entry {
            ScorerEntry::Lexicon { id, path } => Ok(Arc::new(self.lexicon(id, path)?)),
            ScorerEntry::Plugin {
                id,
                command,
                args,
                field,
                timeout_ms,
            } => {
                let key = (command.clone(), args.clone());
                let client = match self.clients.get(&key) {
                    Some(c) => c.clone(),
                    None => {
                        let c = Arc::new(PluginClient::spawn(command, args, Duration::from_millis(*timeout_ms))?);
                        self.clients.insert(key, c.clone());
                        c
                    }
                };
                Ok(Arc::new(PluginScorer::new(id.clone(), field.clone(), client)))
            }
        }
    }

    fn lexicon(&self, id: &str, path: &Path) -> Result<LexiconScorer, CliError> {
        if !path.is_file() {
            return Err(CliError::config(format!("missing lexicon: {}", path.display())));
        }
        Ok(LexiconScorer::load(id, path)?)
    }

    pub fn committee(&mut self, name: &str, entries: &[ScorerEntry]) -> Result<Committee, CliError> {
        let members = entries.iter().map(|e| self.scorer(e)).collect::<Result<Vec<_>, _>>()?;
        Ok(Committee::new(name, members)?)
    }

    pub fn router(&mut self, spec: &RouterSpec) -> Result<TypeRouter, CliError> {
        match spec {
            RouterSpec::CommitteeGated { race, sex, religion } => Ok(TypeRouter::CommitteeGated {
                race: self.lexicon("cue_race", race)?,
                sex: self.lexicon("cue_sex", sex)?,
                religion: self.lexicon("cue_religion", religion)?,
            }),
            RouterSpec::PerType { race, sex, religion, other } => Ok(TypeRouter::PerType([
                self.scorer(race)?,
                self.scorer(sex)?,
                self.scorer(religion)?,
                self.scorer(other)?,
            ])),
        }
    }
}

pub fn read_prompts(path: &Path) -> Result<Vec<Prompt>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read prompts {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| CliError::config(format!("{}:{}: expected id<TAB>text", path.display(), i + 1)))?;
        out.push(Prompt::new(id, body));
    }
    Ok(out)
}

pub fn write_prompts(path: &Path, prompts: &[Prompt]) -> std::io::Result<()> {
    let mut s = String::new();
    for p in prompts {
        s.push_str(&p.id);
        s.push('\t');
        s.push_str(&p.text);
        s.push('\n');
    }
    fs::write(path, s)
}

/// Keeps prompts scoring at least `filter` under `report`, then a seeded
/// sample of at most `n` in file order.
pub fn select_prompts(prompts: Vec<Prompt>, report: &Committee, filter: f64, n: usize, seed: u64) -> Result<Vec<Prompt>, CliError> {
    let mut kept = Vec::new();
    for p in prompts {
        if report.score(&p.text)? >= filter {
            kept.push(p);
        }
    }
    if kept.len() <= n {
        return Ok(kept);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, kept.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| kept[i].clone()).collect())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

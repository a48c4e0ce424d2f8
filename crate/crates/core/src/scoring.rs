//! Bias scoring: lexicon scorers, external plugin scorers, committee
//! aggregation and four-type routing.
//!
//! The trigger committee and the reporting committee are separate objects.
//! The adaptation loop only ever receives the trigger committee; each
//! committee counts its own evaluations so the separation can be audited.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Routing labels, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasType {
    Race,
    Sex,
    Religion,
    Other,
}

impl BiasType {
    pub const ALL: [BiasType; 4] = [BiasType::Race, BiasType::Sex, BiasType::Religion, BiasType::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasType::Race => "race",
            BiasType::Sex => "sex",
            BiasType::Religion => "religion",
            BiasType::Other => "other",
        }
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "race" => Ok(BiasType::Race),
            "sex" => Ok(BiasType::Sex),
            "religion" => Ok(BiasType::Religion),
            "other" => Ok(BiasType::Other),
            _ => Err(Error::input(format!("unknown bias type `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerRole {
    Trigger,
    Report,
    Both,
}

impl ScorerRole {
    pub fn triggers(self) -> bool {
        matches!(self, ScorerRole::Trigger | ScorerRole::Both)
    }

    pub fn reports(self) -> bool {
        matches!(self, ScorerRole::Report | ScorerRole::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Lexicon,
    Plugin,
}

/// A bias scoring function `b: text → [0, 1]`.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;
    fn kind(&self) -> ScorerKind;
    /// Raw score; callers clamp via [`score_clamped`].
    fn score(&self, text: &str) -> Result<f64>;
}

pub fn score_clamped(scorer: &dyn Scorer, text: &str) -> Result<f64> {
    let s = scorer.score(text)?;
    if s.is_nan() {
        return Err(Error::scoring(scorer.id(), "score is NaN"));
    }
    Ok(s.clamp(0.0, 1.0))
}

/// Case-folds and replaces punctuation with whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Weighted-term scorer with a noisy-or squash: `1 − (1 − f)·Π(1 − w_i)`
/// over the distinct terms present in the text, where `f` is a base rate
/// (0 unless set). Terms may span several words.
#[derive(Clone, Debug)]
pub struct LexiconScorer {
    id: String,
    terms: Vec<(Vec<String>, f64)>,
    floor: f64,
}

impl LexiconScorer {
    pub fn new<I, S>(id: impl Into<String>, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let id = id.into();
        let mut out: Vec<(Vec<String>, f64)> = Vec::new();
        for (term, w) in terms {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(format!(
                    "lexicon `{id}`: weight {w} for `{}` outside [0, 1]",
                    term.as_ref()
                )));
            }
            let words = normalize(term.as_ref());
            if words.is_empty() {
                continue;
            }
            match out.iter_mut().find(|(t, _)| *t == words) {
                Some(existing) => existing.1 = w,
                None => out.push((words, w)),
            }
        }
        Ok(Self { id, terms: out, floor: 0.0 })
    }

    /// Score of a text containing no lexicon term.
    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::config(format!("lexicon `{}`: floor {floor} outside [0, 1)", self.id)));
        }
        self.floor = floor;
        Ok(self)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Parses `term<TAB>weight` lines; blank lines and `#` comments skipped.
    /// A `@floor<TAB>f` line sets the base rate.
    pub fn parse(id: impl Into<String>, source: &str) -> Result<Self> {
        let id = id.into();
        let mut terms = Vec::new();
        let mut floor = 0.0;
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (term, weight) = line.split_once('\t').ok_or_else(|| {
                Error::config(format!("lexicon `{id}` line {}: expected term<TAB>weight", lineno + 1))
            })?;
            let w: f64 = weight.trim().parse().map_err(|_| {
                Error::config(format!("lexicon `{id}` line {}: bad weight `{weight}`", lineno + 1))
            })?;
            if term == "@floor" {
                floor = w;
            } else {
                terms.push((term.to_string(), w));
            }
        }
        Self::new(id, terms)?.with_floor(floor)
    }

    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self> {
        Self::parse(id, &fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        if self.floor > 0.0 {
            s.push_str(&format!("@floor\t{}\n", self.floor));
        }
        for (t, w) in &self.terms {
            s.push_str(&format!("{}\t{}\n", t.join(" "), w));
        }
        s
    }

    pub fn terms(&self) -> impl Iterator<Item = (String, f64)> + '_ {
        self.terms.iter().map(|(t, w)| (t.join(" "), *w))
    }

    /// Distinct lexicon terms occurring in `text`.
    pub fn matches(&self, text: &str) -> Vec<String> {
        let words = normalize(text);
        self.terms
            .iter()
            .filter(|(t, _)| words.windows(t.len()).any(|w| w == t.as_slice()))
            .map(|(t, _)| t.join(" "))
            .collect()
    }

    pub fn score_text(&self, text: &str) -> f64 {
        let words = normalize(text);
        let mut keep = 1.0 - self.floor;
        for (t, w) in &self.terms {
            if words.windows(t.len()).any(|win| win == t.as_slice()) {
                keep *= 1.0 - w;
            }
        }
        (1.0 - keep).clamp(0.0, 1.0)
    }
}

impl Scorer for LexiconScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ScorerKind {
        ScorerKind::Lexicon
    }

    fn score(&self, text: &str) -> Result<f64> {
        Ok(self.score_text(text))
    }
}

/// A set of scorers averaged with equal weight.
pub struct Committee {
    name: String,
    members: Vec<Arc<dyn Scorer>>,
    evaluations: AtomicU64,
}

impl fmt::Debug for Committee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Committee")
            .field("name", &self.name)
            .field("members", &self.member_ids())
            .finish()
    }
}

impl Committee {
    pub fn new(name: impl Into<String>, members: Vec<Arc<dyn Scorer>>) -> Result<Self> {
        let name = name.into();
        if members.is_empty() {
            return Err(Error::config(format!("committee `{name}` has no scorers")));
        }
        Ok(Self {
            name,
            members,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id().to_string()).collect()
    }

    pub fn members(&self) -> &[Arc<dyn Scorer>] {
        &self.members
    }

    /// Number of texts scored so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Per-member clamped scores in registration order.
    pub fn member_scores(&self, text: &str) -> Result<Vec<(String, f64)>> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.members
            .iter()
            .map(|m| Ok((m.id().to_string(), score_clamped(m.as_ref(), text)?)))
            .collect()
    }

    /// Committee mean `b̄(text)`.
    pub fn score(&self, text: &str) -> Result<f64> {
        Ok(mean_score(self.member_scores(text)?.iter().map(|(_, s)| *s)))
    }
}

/// Arithmetic mean clamped to `[0, 1]`; empty input gives 0.
pub fn mean_score(scores: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = scores
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).clamp(0.0, 1.0)
    }
}

/// Safe-set membership: `b̄ ≤ τ`.
pub fn is_safe(score: f64, tau: f64) -> bool {
    score <= tau
}

/// Registered scorers with roles. Produces the two committees.
#[derive(Default)]
pub struct ScorerRegistry {
    entries: Vec<(Arc<dyn Scorer>, ScorerRole)>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scorer: Arc<dyn Scorer>, role: ScorerRole) -> Result<()> {
        if self.entries.iter().any(|(s, _)| s.id() == scorer.id()) {
            return Err(Error::config(format!("scorer `{}` registered twice", scorer.id())));
        }
        self.entries.push((scorer, role));
        Ok(())
    }

    pub fn trigger_committee(&self) -> Result<Committee> {
        Committee::new(
            "trigger",
            self.entries
                .iter()
                .filter(|(_, r)| r.triggers())
                .map(|(s, _)| s.clone())
                .collect(),
        )
    }

    pub fn report_committee(&self) -> Result<Committee> {
        Committee::new(
            "report",
            self.entries
                .iter()
                .filter(|(_, r)| r.reports())
                .map(|(s, _)| s.clone())
                .collect(),
        )
    }
}

/// How per-type routing scores are produced.
pub enum TypeRouter {
    /// One scorer per type: `r_t = scorer_t(text)`.
    PerType([Arc<dyn Scorer>; 4]),
    /// Routing reuses the committee mean: `r_t = b̄` when the type's cue
    /// lexicon matches the text, else 0; `r_other = b̄` always.
    CommitteeGated {
        race: LexiconScorer,
        sex: LexiconScorer,
        religion: LexiconScorer,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    /// Indexed by [`BiasType::index`].
    pub scores: [f64; 4],
    pub triggered: Vec<BiasType>,
    pub dominant: BiasType,
}

impl Routing {
    pub fn from_scores(scores: [f64; 4], epsilon: f64) -> Self {
        let scores = scores.map(|s| s.clamp(0.0, 1.0));
        let triggered = BiasType::ALL
            .into_iter()
            .filter(|t| scores[t.index()] > epsilon)
            .collect();
        let mut dominant = BiasType::Race;
        for t in BiasType::ALL {
            if scores[t.index()] > scores[dominant.index()] {
                dominant = t;
            }
        }
        Self {
            scores,
            triggered,
            dominant,
        }
    }

    pub fn score(&self, t: BiasType) -> f64 {
        self.scores[t.index()]
    }
}

impl TypeRouter {
    /// Routing scores for `text`. `committee_mean` is only read by the gated
    /// wiring.
    pub fn route(&self, text: &str, committee_mean: f64, epsilon: f64) -> Result<Routing> {
        let scores = match self {
            TypeRouter::PerType(scorers) => {
                let mut s = [0.0; 4];
                for (slot, scorer) in s.iter_mut().zip(scorers.iter()) {
                    *slot = score_clamped(scorer.as_ref(), text)?;
                }
                s
            }
            TypeRouter::CommitteeGated { race, sex, religion } => {
                let gate = |lex: &LexiconScorer| {
                    if lex.score_text(text) > 0.0 {
                        committee_mean
                    } else {
                        0.0
                    }
                };
                [gate(race), gate(sex), gate(religion), committee_mean]
            }
        };
        Ok(Routing::from_scores(scores, epsilon))
    }
}

/// Everything the trigger path knows about one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub text: String,
    pub per_scorer: Vec<(String, f64)>,
    pub committee_mean: f64,
    pub routing: Routing,
}

impl ScoreReport {
    pub fn triggered_types(&self) -> &[BiasType] {
        &self.routing.triggered
    }
}

/// Scores `text` with the trigger committee and routes it.
pub fn score_report(
    text: &str,
    committee: &Committee,
    router: &TypeRouter,
    epsilon: f64,
) -> Result<ScoreReport> {
    let per_scorer = committee.member_scores(text)?;
    let committee_mean = mean_score(per_scorer.iter().map(|(_, s)| *s));
    let routing = router.route(text, committee_mean, epsilon)?;
    Ok(ScoreReport {
        text: text.to_string(),
        per_scorer,
        committee_mean,
        routing,
    })
}

// ---------------------------------------------------------------------------
// Plugin protocol

pub const DEFAULT_PLUGIN_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginRequest {
    pub id: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginResponse {
    pub id: u64,
    pub scores: BTreeMap<String, f64>,
}

struct PluginConnection {
    child: Option<Child>,
    stdin: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// A connection to an external scorer process speaking line-delimited JSON.
/// One request is in flight at a time.
pub struct PluginClient {
    label: String,
    timeout: Duration,
    conn: Mutex<PluginConnection>,
}

impl PluginClient {
    /// Spawns `program args…` and talks over its standard streams.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::scoring(program, format!("spawn failed: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(program, stdout, stdin, timeout);
        client.conn.get_mut().expect("fresh mutex").child = Some(child);
        Ok(client)
    }

    /// Talks over arbitrary streams (a socket, an in-process pipe).
    pub fn from_streams<R, W>(label: &str, reader: R, writer: W, timeout: Duration) -> Self
    where
        R: std::io::Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            label: label.to_string(),
            timeout,
            conn: Mutex::new(PluginConnection {
                child: None,
                stdin: Box::new(writer),
                lines: rx,
                next_id: 0,
            }),
        }
    }

    pub fn request(&self, text: &str) -> Result<BTreeMap<String, f64>> {
        let err = |m: String| Error::scoring(&self.label, m);
        let mut conn = self.conn.lock().map_err(|_| err("connection poisoned".into()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        let line = serde_json::to_string(&PluginRequest {
            id,
            text: text.to_string(),
        })?;
        writeln!(conn.stdin, "{line}")
            .and_then(|_| conn.stdin.flush())
            .map_err(|e| err(format!("write failed: {e}")))?;
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(err(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(err(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(err("plugin closed its output".into())),
        };
        let resp: PluginResponse = serde_json::from_str(&reply)
            .map_err(|e| err(format!("malformed response `{reply}`: {e}")))?;
        if resp.id != id {
            return Err(err(format!("response id {} does not echo request id {id}", resp.id)));
        }
        Ok(resp.scores)
    }
}

impl Drop for PluginClient {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            if let Some(child) = conn.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

/// One named score out of a plugin's response.
pub struct PluginScorer {
    id: String,
    field: String,
    client: Arc<PluginClient>,
}

impl PluginScorer {
    pub fn new(id: impl Into<String>, field: impl Into<String>, client: Arc<PluginClient>) -> Self {
        Self {
            id: id.into(),
            field: field.into(),
            client,
        }
    }
}

impl Scorer for PluginScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ScorerKind {
        ScorerKind::Plugin
    }

    fn score(&self, text: &str) -> Result<f64> {
        let scores = self.client.request(text).map_err(|e| match e {
            Error::Scoring { message, .. } => Error::scoring(&self.id, message),
            other => other,
        })?;
        let s = *scores
            .get(&self.field)
            .ok_or_else(|| Error::scoring(&self.id, format!("response lacks `{}`", self.field)))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::scoring(&self.id, format!("score {s} outside [0, 1]")));
        }
        Ok(s)
    }
}

/// Serving half of the protocol: answers every request line on `input` with
/// the scores of `scorers`, until end of input.
pub fn serve_plugin<R: BufRead, W: Write>(
    scorers: &[Arc<dyn Scorer>],
    input: R,
    mut output: W,
) -> Result<u64> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: PluginRequest = serde_json::from_str(&line)?;
        let mut scores = BTreeMap::new();
        for s in scorers {
            scores.insert(s.id().to_string(), score_clamped(s.as_ref(), &req.text)?);
        }
        writeln!(output, "{}", serde_json::to_string(&PluginResponse { id: req.id, scores })?)?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Texts whose score exceeds `epsilon`.
pub fn triggered_at(scores: &[f64], epsilon: f64) -> HashSet<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > epsilon)
        .map(|(i, _)| i)
        .collect()
}

//! Generic safe corpus and typed SafeBank: ingest with a safety filter and
//! per-type caps, persistence, batch sampling and context alignment.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{TokenId, TrainingExample, Vocabulary, SEPARATOR_TOKEN};
use crate::scoring::{score_clamped, BiasType, Scorer};

pub const BANK_FORMAT_VERSION: u32 = 1;

/// Maximum history tokens kept in front of a safe text.
pub const DEFAULT_MAX_LEN_UPDATE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeEntry {
    pub text: String,
    pub ty: BiasType,
    pub score: f64,
}

/// Source record before ingest: text plus the dataset's own axis label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub text: String,
    pub axis: String,
}

impl RawRecord {
    pub fn new(text: impl Into<String>, axis: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            axis: axis.into(),
        }
    }
}

/// Maps a source axis label onto the routing labels. Unknown labels are
/// `None` and end up in `other`.
pub fn map_axis(axis: &str) -> Option<BiasType> {
    let a = axis.trim().to_lowercase();
    match a.as_str() {
        "race" | "race_ethnicity" | "ethnicity" | "nationality" => Some(BiasType::Race),
        "sex" | "gender" | "gender_and_sex" | "sexual_orientation" => Some(BiasType::Sex),
        "religion" => Some(BiasType::Religion),
        "other" | "ability" | "age" | "body_type" | "characteristics" | "cultural"
        | "political_ideologies" | "socioeconomic_class" | "nonce" => Some(BiasType::Other),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// Entries must satisfy `b(text) ≤ filter`.
    pub filter: f64,
    pub cap_per_type: usize,
    pub generic_target: usize,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            filter: 0.2,
            cap_per_type: 800,
            generic_target: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub format_version: u32,
    pub source: String,
    pub scorer: String,
    pub filter: f64,
    pub cap_per_type: usize,
    pub generic_target: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: usize,
    pub rejected_by_filter: usize,
    pub duplicates: usize,
    pub over_cap: usize,
    /// Records whose axis label was not recognised (routed to `other`).
    pub unmapped_axis: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafeBank {
    provenance: BankProvenance,
    buckets: [Vec<SafeEntry>; 4],
    generic: Vec<SafeEntry>,
}

impl SafeBank {
    /// Builds a bank from typed records and generic texts.
    ///
    /// Records are visited in a seed-shuffled order; each is scored, dropped
    /// if above the filter or a duplicate within its type, and kept while the
    /// type is under its cap. Kept entries are stored sorted by text so that
    /// re-ingesting a bank reproduces it.
    pub fn ingest(
        source: &str,
        records: &[RawRecord],
        generic_texts: &[String],
        scorer: &dyn Scorer,
        cfg: &IngestConfig,
    ) -> Result<(Self, IngestStats)> {
        if !(0.0..=1.0).contains(&cfg.filter) {
            return Err(Error::config("ingest filter must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stats = IngestStats::default();
        let mut buckets: [Vec<SafeEntry>; 4] = Default::default();
        let mut seen: [HashSet<String>; 4] = Default::default();

        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            let rec = &records[i];
            let ty = map_axis(&rec.axis).unwrap_or_else(|| {
                stats.unmapped_axis += 1;
                BiasType::Other
            });
            let t = ty.index();
            if seen[t].contains(&rec.text) {
                stats.duplicates += 1;
                continue;
            }
            if buckets[t].len() >= cfg.cap_per_type {
                stats.over_cap += 1;
                continue;
            }
            let score = score_clamped(scorer, &rec.text)?;
            if score > cfg.filter {
                stats.rejected_by_filter += 1;
                continue;
            }
            seen[t].insert(rec.text.clone());
            buckets[t].push(SafeEntry {
                text: rec.text.clone(),
                ty,
                score,
            });
            stats.accepted += 1;
        }
        if stats.unmapped_axis > 0 {
            log::warn!("{} records had unrecognised axis labels", stats.unmapped_axis);
        }

        let mut generic = Vec::new();
        let mut generic_seen = HashSet::new();
        let mut gorder: Vec<usize> = (0..generic_texts.len()).collect();
        gorder.shuffle(&mut rng);
        for i in gorder {
            if generic.len() >= cfg.generic_target {
                break;
            }
            let text = &generic_texts[i];
            if !generic_seen.insert(text.clone()) {
                continue;
            }
            let score = score_clamped(scorer, text)?;
            if score > cfg.filter {
                continue;
            }
            generic.push(SafeEntry {
                text: text.clone(),
                ty: BiasType::Other,
                score,
            });
        }

        for b in buckets.iter_mut() {
            b.sort_by(|x, y| x.text.cmp(&y.text));
        }
        generic.sort_by(|x, y| x.text.cmp(&y.text));

        let bank = Self {
            provenance: BankProvenance {
                format_version: BANK_FORMAT_VERSION,
                source: source.to_string(),
                scorer: scorer.id().to_string(),
                filter: cfg.filter,
                cap_per_type: cfg.cap_per_type,
                generic_target: cfg.generic_target,
                seed: cfg.seed,
            },
            buckets,
            generic,
        };
        Ok((bank, stats))
    }

    pub fn provenance(&self) -> &BankProvenance {
        &self.provenance
    }

    pub fn bucket(&self, ty: BiasType) -> &[SafeEntry] {
        &self.buckets[ty.index()]
    }

    pub fn generic(&self) -> &[SafeEntry] {
        &self.generic
    }

    pub fn is_empty(&self) -> bool {
        self.generic.is_empty() && self.buckets.iter().all(Vec::is_empty)
    }

    pub fn typed_len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    /// The typed entries as source records, for re-ingest.
    pub fn to_records(&self) -> Vec<RawRecord> {
        self.buckets
            .iter()
            .flatten()
            .map(|e| RawRecord::new(e.text.clone(), e.ty.as_str()))
            .collect()
    }

    pub fn generic_texts(&self) -> Vec<String> {
        self.generic.iter().map(|e| e.text.clone()).collect()
    }

    /// Draws `k` distinct entries from the `dominant` bucket, topping up from
    /// the generic corpus when the bucket is short.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        dominant: BiasType,
        k: usize,
        rng: &mut R,
    ) -> Result<SafeBatch> {
        if self.is_empty() {
            return Err(Error::Adaptation("safe bank is empty".into()));
        }
        let bucket = self.bucket(dominant);
        if bucket.len() + self.generic.len() < k {
            return Err(Error::Adaptation(format!(
                "need {k} safe texts, `{dominant}` has {} and the generic corpus {}",
                bucket.len(),
                self.generic.len()
            )));
        }
        let from_bucket = k.min(bucket.len());
        let mut entries: Vec<SafeEntry> = index::sample(rng, bucket.len(), from_bucket)
            .into_iter()
            .map(|i| bucket[i].clone())
            .collect();
        let fallback = k - from_bucket;
        if fallback > 0 {
            entries.extend(
                index::sample(rng, self.generic.len(), fallback)
                    .into_iter()
                    .map(|i| self.generic[i].clone()),
            );
        }
        Ok(SafeBatch { entries, fallback })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{}", serde_json::to_string(&self.provenance)?)?;
        for e in self.buckets.iter().flatten() {
            let line = BankLine {
                text: e.text.clone(),
                ty: e.ty.as_str().to_string(),
                score: e.score,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        for e in &self.generic {
            let line = BankLine {
                text: e.text.clone(),
                ty: GENERIC_LABEL.to_string(),
                score: e.score,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::input(format!("{} is empty", path.display())))??;
        let provenance: BankProvenance = serde_json::from_str(&header)?;
        if provenance.format_version != BANK_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                what: "safe bank".into(),
                expected: BANK_FORMAT_VERSION,
                found: provenance.format_version,
            });
        }
        let mut buckets: [Vec<SafeEntry>; 4] = Default::default();
        let mut generic = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BankLine = serde_json::from_str(&line)?;
            if rec.ty == GENERIC_LABEL {
                generic.push(SafeEntry {
                    text: rec.text,
                    ty: BiasType::Other,
                    score: rec.score,
                });
            } else {
                let ty: BiasType = rec.ty.parse()?;
                buckets[ty.index()].push(SafeEntry {
                    text: rec.text,
                    ty,
                    score: rec.score,
                });
            }
        }
        Ok(Self {
            provenance,
            buckets,
            generic,
        })
    }
}

const GENERIC_LABEL: &str = "generic";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankLine {
    text: String,
    #[serde(rename = "type")]
    ty: String,
    score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafeBatch {
    pub entries: Vec<SafeEntry>,
    /// How many entries came from the generic corpus.
    pub fallback: usize,
}

/// `concat(history tail, ⟂, safe text)` as token ids. The context part is
/// scored as conditioning only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedText {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl AlignedText {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.context.clone();
        t.extend(&self.target);
        t
    }

    pub fn to_example(&self) -> TrainingExample {
        TrainingExample::new(self.context.clone(), self.target.clone())
    }
}

/// Keeps the last `max_len_update` history tokens, appends the separator and
/// the encoded safe text. When `max_total` is set the safe text is cut so the
/// whole example stays within it.
pub fn context_align(
    vocab: &Vocabulary,
    history: &[TokenId],
    entry_text: &str,
    max_len_update: usize,
    max_total: Option<usize>,
) -> Result<AlignedText> {
    let sep = vocab
        .separator_id()
        .ok_or_else(|| Error::config(format!("vocabulary lacks separator `{SEPARATOR_TOKEN}`")))?;
    let start = history.len().saturating_sub(max_len_update);
    let mut context = history[start..].to_vec();
    context.push(sep);
    let mut target = vocab.encode(entry_text)?;
    if let Some(cap) = max_total {
        target.truncate(cap.saturating_sub(context.len()));
    }
    Ok(AlignedText { context, target })
}

/// Text-level alignment: `"<tail> ⟂ <entry>"`, tail counted in whitespace words.
pub fn context_align_text(history: &str, entry_text: &str, max_len_update: usize) -> String {
    let words: Vec<&str> = history.split_whitespace().collect();
    let tail = &words[words.len().saturating_sub(max_len_update)..];
    let mut parts: Vec<&str> = tail.to_vec();
    parts.push(SEPARATOR_TOKEN);
    parts.extend(entry_text.split_whitespace());
    parts.join(" ")
}

//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use captta::experiment::{evaluate_records, frozen_scores, frozen_trigger_rate, run_prompts, RunMode, RunOutcome};
use captta::genmodel::Generator;
use captta::metrics::{aggregate_run, did_paired, ecdf, paired_t_test, summary_table, EpisodeMetrics, SummaryRow, SUMMARY_COLUMNS};
use captta::ood::{evaluate, score_sets, Detector, EmbeddingLabel, EmbeddingSet, DEFAULT_BOOTSTRAP, DEFAULT_K};
use captta::optim::UpdateKind;
use captta::precond::{build_preconditioner, estimate_diag_fisher, Preconditioner, ReferenceCorpus};
use captta::safebank::SafeBank;
use captta::scenario::{data, lines, ScenarioConfig, ToyScenario};
use captta::scoring::{serve_plugin, LexiconScorer, Scorer};
use captta::tta::{read_records, write_records, EpisodeEnv, EpisodeRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    load_config, read_lines, read_prompts, select_prompts, write_prompts, Artifacts, ExperimentConfig, FisherSpec,
    PromptSpec, RouterSpec, ScorerEntry, ScorerFactory, ScorerSpec,
};
use crate::manifest::{file_digest, unix_now, RunManifest, MANIFEST_FILE};
use crate::CliError;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FAILURES_FILE: &str = "failures.json";
pub const SUMMARY_TSV: &str = "summary.tsv";
pub const SUMMARY_JSON: &str = "summary.json";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// init

/// Writes the bundled toy scenario as plain artifacts plus a config file.
pub fn init(dir: &Path, prompts: Option<usize>) -> Result<(), CliError> {
    let mut sc = ScenarioConfig::default();
    if let Some(n) = prompts {
        sc.prompt_count = n;
    }
    let s = ToyScenario::build(sc)?;
    fs::create_dir_all(dir.join("lexicons"))?;
    fs::create_dir_all(dir.join("embeddings"))?;
    s.generator.save(&dir.join("model.json"))?;
    s.evaluator.save(&dir.join("evaluator.json"))?;
    s.bank.save(&dir.join("bank.json"))?;
    let reference: Vec<String> = s
        .bank
        .to_records()
        .into_iter()
        .map(|r| r.text)
        .chain(s.bank.generic_texts())
        .collect();
    write(&dir.join("reference.txt"), &(reference.join("\n") + "\n"))?;
    write_prompts(&dir.join("prompts.tsv"), &s.prompts)?;
    write(&dir.join("probes.txt"), data::PROBES)?;
    for (id, src) in data::TRIGGER.iter().chain(data::REPORT.iter()) {
        write(&dir.join("lexicons").join(format!("{id}.lex")), src)?;
    }
    for (id, src) in [
        ("cue_race", data::CUE_RACE),
        ("cue_sex", data::CUE_SEX),
        ("cue_religion", data::CUE_RELIGION),
    ] {
        write(&dir.join("lexicons").join(format!("{id}.lex")), src)?;
    }
    let vocab = s.generator.vocab();
    let encode = |texts: &[String]| texts.iter().map(|t| vocab.encode_strict(t)).collect::<captta::Result<Vec<_>>>();
    let neutral = lines(data::NEUTRAL);
    let (fit, held_out) = neutral.split_at(neutral.len() * 2 / 3);
    let id_texts: Vec<String> = held_out.iter().cloned().chain(lines(data::PROBES)).collect();
    let sets = [
        ("reference", EmbeddingLabel::Reference, encode(fit)?),
        ("id", EmbeddingLabel::Candidate, encode(&id_texts)?),
        ("ood", EmbeddingLabel::Candidate, encode(&lines(data::BIASED))?),
    ];
    for (name, label, texts) in sets {
        EmbeddingSet::from_model(format!("toy-{name}"), label, &s.generator, &texts)?
            .save(&dir.join("embeddings").join(format!("{name}.emb")))?;
    }
    write(&dir.join("config.toml"), &toy_config(&s)?)?;
    println!("wrote toy scenario with {} prompts to {}", s.prompts.len(), dir.display());
    Ok(())
}

fn toy_config(s: &ToyScenario) -> Result<String, CliError> {
    let lex = |ids: &[(&str, &str)]| {
        ids.iter()
            .map(|(id, _)| ScorerEntry::Lexicon {
                id: id.to_string(),
                path: PathBuf::from(format!("lexicons/{id}.lex")),
            })
            .collect()
    };
    let fisher = s.fisher_config();
    let cfg = ExperimentConfig {
        seed: 0,
        system: "captta".into(),
        mode: RunMode::Adaptive,
        output_dir: "runs/captta".into(),
        jobs: 1,
        max_failure_fraction: 0.0,
        artifacts: Artifacts {
            model: "model.json".into(),
            evaluator: "evaluator.json".into(),
            bank: "bank.json".into(),
            preconditioner: "precond.json".into(),
            reference: "reference.txt".into(),
        },
        prompts: PromptSpec {
            path: "prompts.tsv".into(),
            filter: s.config.prompt_filter,
            sample: s.config.prompt_count,
        },
        scorers: ScorerSpec {
            trigger: lex(&data::TRIGGER),
            report: lex(&data::REPORT),
            router: RouterSpec::CommitteeGated {
                race: "lexicons/cue_race.lex".into(),
                sex: "lexicons/cue_sex.lex".into(),
                religion: "lexicons/cue_religion.lex".into(),
            },
        },
        fisher: FisherSpec {
            continuation_len: fisher.continuation_len,
            seed: fisher.seed,
            ..FisherSpec::default()
        },
        episode: captta::tta::EpisodeConfig::default(),
    };
    toml::to_string(&cfg).map_err(|e| CliError::failure(format!("cannot serialize config: {e}")))
}

// ---------------------------------------------------------------------------
// precompute

fn load_reference(cfg: &ExperimentConfig, model: &Generator) -> Result<ReferenceCorpus, CliError> {
    let texts = read_lines(&cfg.artifacts.reference)?;
    if texts.is_empty() {
        return Err(CliError::config(format!("reference corpus {} is empty", cfg.artifacts.reference.display())));
    }
    let tokens = texts
        .iter()
        .map(|t| model.vocab().encode(t))
        .collect::<captta::Result<Vec<_>>>()?;
    Ok(ReferenceCorpus::new(tokens))
}

pub fn precompute(config: &Path, overrides: &[String], verify: bool) -> Result<(), CliError> {
    let cfg = load_config(config, overrides)?;
    cfg.require_files(&[&cfg.artifacts.model, &cfg.artifacts.reference])?;
    let model = Generator::load(&cfg.artifacts.model)?;
    let corpus = load_reference(&cfg, &model)?;
    let estimate = estimate_diag_fisher(&model, &corpus, &cfg.fisher.fisher_config())?;
    let pre = build_preconditioner(&estimate, cfg.fisher.damping)?;
    let json = pre.to_json()?;
    let path = &cfg.artifacts.preconditioner;
    if verify {
        let existing = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {} for verification: {e}", path.display())))?;
        if existing != json {
            return Err(CliError::digest(format!(
                "{} does not match a fresh estimate (stored {}, fresh {})",
                path.display(),
                captta::digest::sha256_hex(existing.as_bytes()),
                captta::digest::sha256_hex(json.as_bytes())
            )));
        }
        println!("verified {}", path.display());
    } else {
        write(path, &json)?;
        println!("wrote {}", path.display());
    }
    let h = &pre.header;
    println!(
        "lambda={} N={} batch={} continuation={} samples={} params={}",
        h.damping, h.steps, h.batch_size, h.continuation_len, h.sample_count, h.n
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

pub struct RunResult {
    pub outcome: RunOutcome,
    pub summary: Option<SummaryRow>,
    pub frozen: Option<Vec<f64>>,
}

fn artifact_paths(cfg: &ExperimentConfig, with_precond: bool) -> BTreeMap<String, PathBuf> {
    let a = &cfg.artifacts;
    let mut m = BTreeMap::from([
        ("model".to_string(), a.model.clone()),
        ("evaluator".to_string(), a.evaluator.clone()),
        ("bank".to_string(), a.bank.clone()),
        ("prompts".to_string(), cfg.prompts.path.clone()),
    ]);
    if with_precond {
        m.insert("preconditioner".to_string(), a.preconditioner.clone());
    }
    m
}

fn uses_preconditioner(cfg: &ExperimentConfig) -> bool {
    cfg.mode == RunMode::Adaptive && cfg.episode.update.kind == UpdateKind::Precond
}

/// Runs the configured system and writes records, metrics, summary and
/// manifest to the output directory. With `frozen` the trigger committee
/// also scores the finished segments (used for static sweeps).
pub fn execute_run(cfg: &ExperimentConfig, frozen: bool) -> Result<RunResult, CliError> {
    let started = unix_now();
    let with_precond = uses_preconditioner(cfg);
    let paths = artifact_paths(cfg, with_precond);
    cfg.require_files(&paths.values().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let model = Generator::load(&cfg.artifacts.model)?;
    let evaluator = Generator::load(&cfg.artifacts.evaluator)?;
    let bank = SafeBank::load(&cfg.artifacts.bank)?;
    let pre = if with_precond {
        Preconditioner::load_verified(&cfg.artifacts.preconditioner, &model)?
    } else {
        Preconditioner::identity(model.param_count())
    };
    let mut factory = ScorerFactory::new();
    let trigger = factory.committee("trigger", &cfg.scorers.trigger)?;
    let report = factory.committee("report", &cfg.scorers.report)?;
    let router = factory.router(&cfg.scorers.router)?;
    let prompts = select_prompts(
        read_prompts(&cfg.prompts.path)?,
        &report,
        cfg.prompts.filter,
        cfg.prompts.sample,
        cfg.seed,
    )?;
    let env = EpisodeEnv {
        trigger: &trigger,
        router: &router,
        bank: &bank,
        preconditioner: &pre,
    };
    let outcome = run_prompts(&prompts, &model, &env, &cfg.episode, cfg.mode, cfg.seed, cfg.jobs)?;
    let metrics = evaluate_records(&outcome.records, &evaluator, &report, cfg.jobs)?;
    let summary = if metrics.is_empty() {
        None
    } else {
        Some(aggregate_run(&cfg.system, &metrics)?)
    };
    let frozen = if frozen {
        Some(frozen_scores(&outcome.records, &trigger)?)
    } else {
        None
    };

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_records(&dir.join(RECORDS_FILE), &outcome.records)?;
    let mut m = String::new();
    for row in &metrics {
        m.push_str(&serde_json::to_string(row)?);
        m.push('\n');
    }
    write(&dir.join(METRICS_FILE), &m)?;
    write(&dir.join(FAILURES_FILE), &(serde_json::to_string_pretty(&outcome.failures)? + "\n"))?;
    write(&dir.join(SUMMARY_TSV), &summary_table(summary.as_slice()))?;
    write(
        &dir.join(SUMMARY_JSON),
        &(serde_json::to_string_pretty(&summary.as_ref().map(SummaryRow::to_json))? + "\n"),
    )?;
    let mut artifacts = BTreeMap::new();
    for (name, p) in &paths {
        artifacts.insert(name.clone(), file_digest(p)?);
    }
    let mut outputs = BTreeMap::new();
    for name in [RECORDS_FILE, METRICS_FILE, FAILURES_FILE, SUMMARY_TSV, SUMMARY_JSON] {
        outputs.insert(name.to_string(), file_digest(&dir.join(name))?);
    }
    RunManifest {
        tool_version: crate::manifest::TOOL_VERSION.to_string(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        system: cfg.system.clone(),
        artifacts,
        artifact_paths: paths,
        outputs,
        started_unix_s: started,
        finished_unix_s: unix_now(),
    }
    .save(dir)?;
    Ok(RunResult {
        outcome,
        summary,
        frozen,
    })
}

fn check_failures(cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<(), CliError> {
    for f in &outcome.failures {
        log::error!("prompt {} failed: {}", f.prompt_id, f.message);
    }
    let frac = outcome.failure_fraction();
    if frac > cfg.max_failure_fraction {
        return Err(CliError::failures(format!(
            "{} of {} episodes failed ({frac:.3} > {})",
            outcome.failures.len(),
            outcome.failures.len() + outcome.records.len(),
            cfg.max_failure_fraction
        )));
    }
    Ok(())
}

pub fn run(config: &Path, overrides: &[String]) -> Result<(), CliError> {
    let cfg = load_config(config, overrides)?;
    let result = execute_run(&cfg, false)?;
    print!("{}", summary_table(result.summary.as_slice()));
    println!("wrote {}", cfg.output_dir.display());
    check_failures(&cfg, &result.outcome)
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Epsilon,
    Segments,
    SegTokens,
    MultiTrigger,
    UpdateKind,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Epsilon => "epsilon",
            Axis::Segments => "segments",
            Axis::SegTokens => "seg_tokens",
            Axis::MultiTrigger => "multi_trigger",
            Axis::UpdateKind => "update_kind",
        }
    }
}

fn axis_overrides(axis: Axis, value: &str, base: &ExperimentConfig) -> Result<Vec<String>, CliError> {
    Ok(match axis {
        Axis::Epsilon => vec![format!("episode.epsilon={value}")],
        Axis::Segments => {
            let k: usize = value
                .parse()
                .map_err(|_| CliError::config(format!("segments value `{value}` is not a count")))?;
            let budget = base.episode.segments * base.episode.generation.tokens_per_segment;
            if k == 0 || budget / k == 0 {
                return Err(CliError::config(format!("cannot split {budget} tokens into {k} segments")));
            }
            vec![
                format!("episode.segments={k}"),
                format!("episode.generation.tokens_per_segment={}", budget / k),
            ]
        }
        Axis::SegTokens => vec![format!("episode.generation.tokens_per_segment={value}")],
        Axis::MultiTrigger => vec![format!("episode.multi_trigger={value}")],
        Axis::UpdateKind => vec![format!("episode.update.kind=\"{value}\"")],
    })
}

fn cell(x: f64) -> String {
    format!("{x:.4}")
}

/// One run per axis value with a shared seed, collected into one table.
pub fn ablate(config: &Path, overrides: &[String], axis: Axis, values: &[String]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::config("ablate needs at least one value"));
    }
    let base = load_config(config, overrides)?;
    let root = base.output_dir.join(format!("ablate-{}", axis.name()));
    let frozen = if axis == Axis::Epsilon {
        let mut o = overrides.to_vec();
        o.push("mode=\"static\"".into());
        o.push("system=\"static\"".into());
        o.push(format!("output_dir=\"{}\"", root.join("static").display()));
        let cfg = load_config(config, &o)?;
        let r = execute_run(&cfg, true)?;
        check_failures(&cfg, &r.outcome)?;
        r.frozen
    } else {
        None
    };
    let mut table = format!("axis\tvalue\t{}\tfrozen_trigger_rate\n", SUMMARY_COLUMNS.join("\t"));
    for v in values {
        let mut o = overrides.to_vec();
        o.extend(axis_overrides(axis, v, &base)?);
        o.push(format!("system=\"{}={}\"", axis.name(), v));
        o.push(format!("output_dir=\"{}\"", root.join(v).display()));
        let cfg = load_config(config, &o)?;
        let r = execute_run(&cfg, false)?;
        check_failures(&cfg, &r.outcome)?;
        let row = r.summary.map(|s| s.to_tsv()).unwrap_or_else(|| format!("{}={}\t0", axis.name(), v));
        let frozen_rate = match (&frozen, axis) {
            (Some(scores), Axis::Epsilon) => cell(frozen_trigger_rate(scores, cfg.episode.epsilon)),
            _ => "-".into(),
        };
        let _ = writeln!(table, "{}\t{v}\t{row}\t{frozen_rate}", axis.name());
    }
    write(&root.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// ood

pub struct OodArgs<'a> {
    pub reference: &'a Path,
    pub id: &'a Path,
    pub ood: &'a Path,
    pub detectors: Vec<Detector>,
    pub k: Option<usize>,
    pub bootstrap: Option<usize>,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn ood(args: OodArgs<'_>) -> Result<(), CliError> {
    for p in [args.reference, args.id, args.ood] {
        if !p.is_file() {
            return Err(CliError::config(format!("missing file: {}", p.display())));
        }
    }
    let reference = EmbeddingSet::load(args.reference)?;
    let id = EmbeddingSet::load(args.id)?;
    let ood = EmbeddingSet::load(args.ood)?;
    let k = args.k.unwrap_or(DEFAULT_K.min(reference.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut table = String::from("detector\tauroc\taupr\tci_low\tci_high\tfar_ood\n");
    let mut results = Vec::new();
    for d in &args.detectors {
        let (so, si) = score_sets(*d, &reference, &id, &ood, k)?;
        let r = evaluate(&d.to_string(), &so, &si, args.bootstrap.unwrap_or(DEFAULT_BOOTSTRAP), &mut rng)?;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.detector,
            cell(r.auroc),
            cell(r.aupr),
            cell(r.ci_low),
            cell(r.ci_high),
            r.far_ood
        );
        results.push(r);
    }
    print!("{table}");
    if let Some(out) = args.out {
        write(&out.join("ood.tsv"), &table)?;
        write(&out.join("ood.json"), &(serde_json::to_string_pretty(&results)? + "\n"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
    records: Vec<EpisodeRecord>,
    metrics: Vec<EpisodeMetrics>,
}

fn find_run_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if root.join(MANIFEST_FILE).is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_run_dirs(&c, out)?;
    }
    Ok(())
}

fn load_run_dir(path: &Path, force: bool) -> Result<RunDir, CliError> {
    let manifest = RunManifest::load(path)?;
    manifest.verify_outputs(path)?;
    if !force {
        manifest.verify_artifacts()?;
    }
    let records = read_records(&path.join(RECORDS_FILE))?;
    let file = fs::File::open(path.join(METRICS_FILE))?;
    let mut metrics = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            metrics.push(serde_json::from_str(&line)?);
        }
    }
    Ok(RunDir {
        path: path.to_path_buf(),
        manifest,
        records,
        metrics,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
}

/// Summary, per-segment trajectories, ECDFs and DiD tests over every run
/// directory under `root`.
pub fn report(root: &Path, out: &Path, baseline: Option<&str>, force: bool) -> Result<(), CliError> {
    if !root.is_dir() {
        return Err(CliError::config(format!("missing records directory: {}", root.display())));
    }
    let mut dirs = Vec::new();
    find_run_dirs(root, &mut dirs)?;
    let runs = dirs.iter().map(|d| load_run_dir(d, force)).collect::<Result<Vec<_>, _>>()?;
    if runs.is_empty() {
        log::warn!("no run directories under {}", root.display());
    }
    let mut digests: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &runs {
        for (name, d) in &r.manifest.artifacts {
            digests.entry(name).or_default().insert(d);
        }
    }
    if let Some((name, _)) = digests.iter().find(|(_, d)| d.len() > 1) {
        if !force {
            return Err(CliError::digest(format!(
                "runs under {} used different `{name}` artifacts; pass --force to report them together",
                root.display()
            )));
        }
    }

    let mut rows = Vec::new();
    for r in &runs {
        if !r.metrics.is_empty() {
            rows.push(aggregate_run(&r.manifest.system, &r.metrics)?);
        }
    }
    write(&out.join("summary.tsv"), &summary_table(&rows))?;

    let mut traj = String::from("system\tprompt_id\tsegment\tbias\ttrigger_score\ttriggered\n");
    let mut ecdf_bias = String::from("system\tbias\tF\n");
    let mut ecdf_update = String::from("system\tupdate_s\tF\n");
    for r in &runs {
        let sys = &r.manifest.system;
        for (rec, m) in r.records.iter().zip(&r.metrics) {
            for (j, seg) in rec.segments.iter().enumerate() {
                let _ = writeln!(
                    traj,
                    "{sys}\t{}\t{j}\t{:.6}\t{}\t{}",
                    rec.prompt_id,
                    m.segment_bias.get(j).copied().unwrap_or(f64::NAN),
                    fmt_opt(seg.trigger_score),
                    seg.triggered
                );
            }
        }
        for (x, f) in ecdf(&r.metrics.iter().map(|m| m.bias).collect::<Vec<_>>()) {
            let _ = writeln!(ecdf_bias, "{sys}\t{x:.6}\t{f:.6}");
        }
        for (x, f) in ecdf(&r.metrics.iter().map(|m| m.update_time_s).collect::<Vec<_>>()) {
            let _ = writeln!(ecdf_update, "{sys}\t{x:.6}\t{f:.6}");
        }
    }
    write(&out.join("trajectories.tsv"), &traj)?;
    write(&out.join("ecdf_bias.tsv"), &ecdf_bias)?;
    write(&out.join("ecdf_update_time.tsv"), &ecdf_update)?;

    let mut did = String::from("system\tbaseline\tsegment\tn\texcluded\tmean\tsd\tt\tp\n");
    let base = match baseline {
        Some(name) => runs.iter().find(|r| r.manifest.system == name),
        None => runs.iter().find(|r| r.records.iter().all(|rec| rec.epsilon.is_none()) && !r.records.is_empty()),
    };
    if let Some(base) = base {
        let base_series: BTreeMap<&str, &Vec<f64>> =
            base.metrics.iter().map(|m| (m.prompt_id.as_str(), &m.segment_bias)).collect();
        for r in runs.iter().filter(|r| r.path != base.path) {
            let mut pairs = Vec::new();
            let mut unmatched = 0;
            for m in &r.metrics {
                match base_series.get(m.prompt_id.as_str()) {
                    Some(b) => pairs.push((m.segment_bias.clone(), (*b).clone())),
                    None => unmatched += 1,
                }
            }
            let k = pairs.iter().map(|(p, _)| p.len()).max().unwrap_or(0);
            for j in 1..k {
                let sample = did_paired(&pairs, j);
                let t = paired_t_test(&sample.differences).ok();
                let _ = writeln!(
                    did,
                    "{}\t{}\t{j}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.manifest.system,
                    base.manifest.system,
                    sample.differences.len(),
                    sample.excluded + unmatched,
                    fmt_opt(t.as_ref().map(|t| t.mean)),
                    fmt_opt(t.as_ref().map(|t| t.sd)),
                    fmt_opt(t.as_ref().and_then(|t| t.t)),
                    fmt_opt(t.as_ref().and_then(|t| t.p)),
                );
            }
        }
    } else if !runs.is_empty() {
        log::warn!("no baseline run found; DiD table left empty");
    }
    write(&out.join("did.tsv"), &did)?;
    println!("report over {} runs written to {}", runs.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// serve-scorer

/// `id=path` lexicon specs served over stdin/stdout.
pub fn serve_scorer(lexicons: &[String]) -> Result<(), CliError> {
    let mut scorers: Vec<Arc<dyn Scorer>> = Vec::new();
    for spec in lexicons {
        let (id, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("lexicon spec `{spec}` is not id=path")))?;
        let path = Path::new(path);
        if !path.is_file() {
            return Err(CliError::config(format!("missing lexicon: {}", path.display())));
        }
        scorers.push(Arc::new(LexiconScorer::load(id, path)?));
    }
    if scorers.is_empty() {
        return Err(CliError::config("serve-scorer needs at least one --lexicon id=path"));
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_plugin(&scorers, stdin.lock(), stdout.lock())?;
    Ok(())
}

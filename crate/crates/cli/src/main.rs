//! `captta`: precompute, run, ablate, ood and report over CAP-TTA experiments.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use captta::ood::Detector;
use clap::{Args, Parser, Subcommand};

use commands::Axis;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIGEST: u8 = 3;
pub const EXIT_FAILURES: u8 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: m.into() }
    }

    pub fn digest(m: impl Into<String>) -> Self {
        Self { code: EXIT_DIGEST, message: m.into() }
    }

    pub fn failures(m: impl Into<String>) -> Self {
        Self { code: EXIT_FAILURES, message: m.into() }
    }

    pub fn failure(m: impl Into<String>) -> Self {
        Self { code: EXIT_FAILURE, message: m.into() }
    }
}

impl From<captta::Error> for CliError {
    fn from(e: captta::Error) -> Self {
        let code = match e {
            captta::Error::Config(_) | captta::Error::Input(_) => EXIT_CONFIG,
            captta::Error::DigestMismatch { .. } | captta::Error::SchemaVersion { .. } => EXIT_DIGEST,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::failure(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "captta", version, about = "Thresholded, preconditioned test-time adaptation on a toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides shared by config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override any config key, e.g. `--set episode.epsilon=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threshold ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// `static` or `adaptive`.
    #[arg(long)]
    mode: Option<String>,
    /// Update rule: `precond`, `sgd` or `adamw`.
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    system: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        let quoted = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        if let Some(v) = self.seed {
            o.push(format!("seed={v}"));
        }
        if let Some(v) = self.jobs {
            o.push(format!("jobs={v}"));
        }
        if let Some(v) = &self.out {
            o.push(format!("output_dir={}", quoted(&v.to_string_lossy())));
        }
        if let Some(v) = self.epsilon {
            o.push(format!("episode.epsilon={v:?}"));
        }
        if let Some(v) = &self.mode {
            o.push(format!("mode={}", quoted(v)));
        }
        if let Some(v) = &self.rule {
            o.push(format!("episode.update.kind={}", quoted(v)));
        }
        if let Some(v) = &self.system {
            o.push(format!("system={}", quoted(v)));
        }
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled toy scenario (artifacts, lexicons, config) to a directory.
    Init {
        dir: PathBuf,
        /// Number of prompts to keep.
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Estimate the reference Fisher and write the preconditioner.
    Precompute {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Recompute and compare against the stored artifact instead of writing.
        #[arg(long)]
        verify: bool,
    },
    /// Run episodes over the prompt set.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One run per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Embedding-based OOD detection with AUROC, AUPR and bootstrap intervals.
    Ood {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        /// `knn`, `mahalanobis`, or both when omitted.
        #[arg(long)]
        detector: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and plot data from run directories.
    Report {
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// System name of the DiD baseline; defaults to the first static run.
        #[arg(long)]
        baseline: Option<String>,
        /// Allow runs over different artifacts in one report.
        #[arg(long)]
        force: bool,
    },
    /// Serve lexicon scorers over the line-delimited JSON plugin protocol.
    ServeScorer {
        /// `id=path`, repeatable.
        #[arg(long = "lexicon", value_name = "ID=PATH")]
        lexicons: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Init { dir, prompts } => commands::init(&dir, prompts),
        Command::Precompute { cfg, verify } => commands::precompute(&cfg.config, &cfg.overrides(), verify),
        Command::Run { cfg } => commands::run(&cfg.config, &cfg.overrides()),
        Command::Ablate { cfg, axis, values } => commands::ablate(&cfg.config, &cfg.overrides(), axis, &values),
        Command::Ood {
            reference,
            id,
            ood,
            detector,
            k,
            bootstrap,
            seed,
            out,
        } => {
            let detectors = match detector {
                Some(d) => vec![d.parse::<Detector>()?],
                None => vec![Detector::Knn, Detector::Mahalanobis],
            };
            commands::ood(commands::OodArgs {
                reference: &reference,
                id: &id,
                ood: &ood,
                detectors,
                k,
                bootstrap,
                seed,
                out: out.as_deref(),
            })
        }
        Command::Report {
            records,
            out,
            baseline,
            force,
        } => commands::report(&records, &out, baseline.as_deref(), force),
        Command::ServeScorer { lexicons } => commands::serve_scorer(&lexicons),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

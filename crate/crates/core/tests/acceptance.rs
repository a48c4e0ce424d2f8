//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.
//!
//! Set `CAPTTA_BLESS=1` to rewrite the toy-effect golden file from the
//! current run instead of comparing against it.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use captta::error::Result as CoreResult;
use captta::experiment::{frozen_scores, frozen_trigger_rate, run_prompts, RunMode};
use captta::genmodel::{AdapterParams, BaseParams, FeatureMap, Generator, TrainingExample, Vocabulary};
use captta::metrics::{did, fleiss_kappa, fluency, perplexity};
use captta::ood::{auroc, evaluate, knn_score, MahalanobisModel};
use captta::optim::{norm, trust_region_step, UpdateKind, UpdateRuleConfig, Updater};
use captta::oracle::{
    descent_bound_check, empirical_grad_stats, kl_projection_certificate, kl_vs_fisher_quadratic, solve_beta, tilt,
    SafeSupport,
};
use captta::precond::{
    build_preconditioner, estimate_diag_fisher, estimation_count, exact_fisher_diag, FisherConfig, FisherDiagEstimate,
    FisherMode, Preconditioner, PreconditionerCache, ReferenceCorpus, DEFAULT_DAMPING,
};
use captta::scenario::{ScenarioConfig, ToyScenario};
use captta::scoring::{BiasType, Committee, Scorer, ScorerKind, TypeRouter};
use captta::tta::{
    drift_report, episode_seed, reset_episode, run_episode, should_trigger, AdaptiveModel, EpisodeConfig, EpisodeEnv,
    EpisodeRecord,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn lib<T>(r: CoreResult<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit_s: u64) -> std::result::Result<(), String> {
    if elapsed > Duration::from_secs(limit_s) {
        return Err(format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()));
    }
    Ok(())
}

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Generator {
    let fmap = FeatureMap::ngram(2, n);
    let d = fmap.dim();
    let base = BaseParams::new(Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5)));
    let a = Array2::from_shape_fn((rank, d), |_| rng.random_range(-0.8..0.8));
    let b = Array2::from_shape_fn((n, rank), |_| rng.random_range(-0.8..0.8));
    Generator::new(vocab(n), fmap, base, AdapterParams::new(a, b, 1.0).unwrap()).unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// 1

/// Smallest `gᵀδ` over grid points `δ ∈ (step·ℤ)ⁿ` with `½ Σ I_i δ_i² ≤ ε`.
fn best_grid_point(g: &[f64], fisher: &[f64], eps: f64, step: f64) -> f64 {
    fn rec(i: usize, g: &[f64], f: &[f64], budget: f64, step: f64, acc: f64, best: &mut f64) {
        if i == g.len() {
            *best = best.min(acc);
            return;
        }
        let k = ((2.0 * budget / f[i]).max(0.0).sqrt() / step).floor() as i64;
        for j in -k..=k {
            let d = j as f64 * step;
            let used = 0.5 * f[i] * d * d;
            if used <= budget {
                rec(i + 1, g, f, budget - used, step, acc + g[i] * d, best);
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, g, fisher, eps, step, 0.0, &mut best);
    best
}

fn trust_region() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let step = 1e-2;
    let mut worst_gap = f64::INFINITY;
    let mut worst_constraint = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fisher: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
        // keep the feasible grid at a few hundred thousand points
        let per_dim = (2e5f64).powf(1.0 / n as f64) / 2.0 * step;
        let eps_max = fisher.iter().map(|f| 0.5 * f * per_dim * per_dim).fold(f64::INFINITY, f64::min).min(2.0);
        let eps = rng.random_range(0.2 * eps_max..eps_max);
        let s = lib(trust_region_step(&g, &fisher, eps))?;
        let quad = 0.5 * s.delta.iter().zip(&fisher).map(|(d, f)| d * d * f).sum::<f64>();
        worst_constraint = worst_constraint.max((quad - eps).abs());
        ensure!((quad - eps).abs() <= 1e-10, "½δᵀIδ = {quad}, ε = {eps}");
        let star = dot(&g, &s.delta);
        let grid = best_grid_point(&g, &fisher, eps, step);
        ensure!(star <= grid + 1e-12, "grid point {grid} beats δ* {star}");
        worst_gap = worst_gap.min(grid - star);
    }
    within(t.elapsed(), 10)?;
    Ok(format!(
        "200 instances, max |½δᵀIδ − ε| = {worst_constraint:.1e}, min grid gap {worst_gap:.2e}"
    ))
}

// 2

fn bernoulli(phi: f64) -> Generator {
    Generator::new(
        vocab(2),
        FeatureMap::Constant { dim: 1 },
        BaseParams::new(ndarray::array![[0.0], [phi]]),
        AdapterParams::new(ndarray::array![[0.7]], ndarray::array![[0.2], [-0.4]], 1.0).unwrap(),
    )
    .unwrap()
}

fn mc_vs_exact(model: &Generator, contexts: Vec<Vec<usize>>, len: usize) -> std::result::Result<f64, String> {
    let exact = lib(exact_fisher_diag(model, &contexts, len))?;
    let corpus = ReferenceCorpus::new(contexts);
    let cfg = FisherConfig {
        steps: 1000,
        batch_size: 100,
        continuation_len: len,
        mode: FisherMode::True,
        seed: 11,
        temperature: 1.0,
    };
    let est = lib(estimate_diag_fisher(model, &corpus, &cfg))?;
    ensure!(est.sample_count == 100_000, "{} samples", est.sample_count);
    let se = est.standard_errors();
    let mut worst = 0.0f64;
    for i in 0..est.values.len() {
        let dev = (est.values[i] - exact.mean[i]).abs();
        ensure!(dev <= 3.0 * se[i], "parameter {i}: MC {} exact {} se {}", est.values[i], exact.mean[i], se[i]);
        if se[i] > 0.0 {
            worst = worst.max(dev / se[i]);
        }
    }
    Ok(worst)
}

fn preconditioner_identity() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let values: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0f64..8.0).exp() - 1.0 })
            .collect();
        let damping = [DEFAULT_DAMPING, 1e-2, 1.0][rng.random_range(0..3)];
        let est = FisherDiagEstimate {
            square_variance: vec![0.0; n],
            values: values.clone(),
            sample_count: 1,
            corpus_id: "c".into(),
            model_digest: "m".into(),
            steps: 1,
            batch_size: 1,
            continuation_len: 1,
            mode: FisherMode::True,
        };
        let p = lib(build_preconditioner(&est, damping))?;
        for (pi, fi) in p.diag.iter().zip(&values) {
            let r = (pi * (fi + damping) - 1.0).abs();
            worst = worst.max(r);
            ensure!(r <= 1e-12, "P(Ī+λ) − 1 = {r}");
            ensure!(*pi > 0.0 && *pi <= 1.0 / damping, "P = {pi} outside (0, 1/λ]");
        }
    }
    let zb = mc_vs_exact(&bernoulli(0.6), vec![vec![]], 1)?;
    let four = random_model(&mut rng, 4, 1);
    let z4 = mc_vs_exact(&four, vec![vec![], vec![0], vec![1, 2], vec![3]], 2)?;
    within(t.elapsed(), 60)?;
    Ok(format!(
        "max |P(Ī+λ)−1| = {worst:.1e}; max MC deviation {zb:.2} SE (Bernoulli), {z4:.2} SE (4-token), 1e5 samples"
    ))
}

// 3

fn kl_fisher() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let rank = rng.random_range(1..=2);
        let model = random_model(&mut rng, n, rank);
        let ctx: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(0..n)).collect();
        let len = rng.random_range(1..=3);
        // base step as large as one capped update
        let cap = UpdateRuleConfig::default().max_delta_norm.unwrap();
        let mut dir: Vec<f64> = (0..model.param_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dn = norm(&dir);
        dir.iter_mut().for_each(|x| *x *= cap / dn);
        let rows = lib(kl_vs_fisher_quadratic(&model, &ctx, len, &dir, &[1.0 / 16.0]))?;
        let r = (rows[0].ratio - 1.0).abs();
        ensure!(r <= 0.05, "ratio {} at scale 1/16", rows[0].ratio);
        worst = worst.max(r);
    }
    within(t.elapsed(), 60)?;
    Ok(format!("50 models, ‖δ‖ = 0.25, max |KL/(½δᵀIδ) − 1| = {worst:.4} at scale 1/16"))
}

// 4

fn gradient_statistics() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 3;
    let model = Generator::new(
        vocab(n),
        FeatureMap::Constant { dim: 2 },
        BaseParams::new(Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))),
        AdapterParams::new(
            Array2::from_shape_fn((1, 2), |_| rng.random_range(-0.8..0.8)),
            Array2::from_shape_fn((n, 1), |_| rng.random_range(-0.8..0.8)),
            1.0,
        )
        .unwrap(),
    )
    .unwrap();
    let examples = (0..8)
        .map(|_| TrainingExample::new(vec![], (0..rng.random_range(1..4)).map(|_| rng.random_range(0..n)).collect()))
        .collect();
    let support = lib(SafeSupport::new(&model, examples))?;
    let report = lib(empirical_grad_stats(&support, &[1, 2, 4, 8, 16], 1000, &mut rng))?;
    let max_z = report.per_m.iter().map(|s| s.max_bias_z).fold(0.0, f64::max);
    ensure!(max_z <= 3.0, "bias {max_z:.2} standard errors");
    ensure!((report.slope + 1.0).abs() <= 0.1, "slope {}", report.slope);
    within(t.elapsed(), 120)?;
    Ok(format!("max bias {max_z:.2} SE, log-log slope {:.3}", report.slope))
}

// 5

fn descent_bound(s: &ToyScenario, pre: &Preconditioner) -> Check {
    let t = Instant::now();
    let examples: Vec<TrainingExample> = BiasType::ALL
        .iter()
        .flat_map(|&ty| s.bank.bucket(ty).iter().take(8))
        .map(|e| TrainingExample::new(vec![], s.generator.vocab().encode_strict(&e.text).unwrap()))
        .collect();
    let support = lib(SafeSupport::new(&s.generator, examples))?;
    let alpha = UpdateKind::Precond.default_learning_rate();
    let m = EpisodeConfig::default().batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rep = lib(descent_bound_check(&s.generator, &support, &pre.diag, alpha, m, 1000, 4, &mut rng))?;
    let frac = rep.per_trial_fraction();
    ensure!(frac >= 0.99, "bound held in {:.1}% of trials", 100.0 * frac);
    within(t.elapsed(), 120)?;
    Ok(format!(
        "held in {:.1}% of 1000 trials, estimated L = {:.3}, support {}",
        100.0 * frac,
        rep.smoothness,
        support.len()
    ))
}

// 6

fn kl_projection() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_tau = 0.0f64;
    let mut worst_margin = f64::INFINITY;
    let mut certified = 0;
    for i in 0..200 {
        let p0 = simplex(&mut rng, 5);
        let b: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
        let mean0 = dot(&p0, &b);
        let tau = lo + rng.random_range(0.05..0.95) * (mean0 - lo);
        let beta = lib(solve_beta(&p0, &b, tau))?;
        let q = lib(tilt(&p0, &b, beta))?;
        worst_tau = worst_tau.max((dot(&q, &b) - tau).abs());
        ensure!((dot(&q, &b) - tau).abs() <= 1e-9, "E_q[b] = {} vs τ = {tau}", dot(&q, &b));
        ensure!(lib(tilt(&p0, &b, 0.0))? == p0, "β = 0 changed the distribution");
        let c = rng.random::<f64>();
        ensure!(lib(tilt(&p0, &[c; 5], rng.random_range(0.1..10.0)))? == p0, "constant b changed the distribution");
        if i < 10 {
            let tau = lo + 0.9 * (mean0 - lo);
            let cert = lib(kl_projection_certificate(&p0, &b, tau, 10_000, &mut rng))?;
            ensure!(cert.accepted == 10_000, "only {} feasible draws", cert.accepted);
            ensure!(cert.min_margin >= -1e-9, "feasible q beats the projection by {}", -cert.min_margin);
            worst_margin = worst_margin.min(cert.min_margin);
            certified += cert.accepted;
        }
    }
    within(t.elapsed(), 60)?;
    Ok(format!(
        "max |E_q[b] − τ| = {worst_tau:.1e}; {certified} feasible q, min KL margin {worst_margin:.2e}"
    ))
}

// 7

struct Fixed {
    id: String,
    table: Vec<(&'static str, f64)>,
}

impl Scorer for Fixed {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ScorerKind {
        ScorerKind::Plugin
    }

    fn score(&self, text: &str) -> CoreResult<f64> {
        Ok(self.table.iter().find(|(t, _)| *t == text).map_or(0.0, |(_, s)| *s))
    }
}

fn fixed(id: &str, table: Vec<(&'static str, f64)>) -> Arc<dyn Scorer> {
    Arc::new(Fixed { id: id.into(), table })
}

fn router_table() -> std::result::Result<(), String> {
    let black = "Black holes are fascinating objects";
    let hate = "I hate those people";
    let committee = lib(Committee::new(
        "trigger",
        vec![
            fixed("s1", vec![(black, 0.0001), (hate, 0.9992)]),
            fixed("s2", vec![(black, 0.0302), (hate, 0.9220)]),
            fixed("s3", vec![(black, 0.5346), (hate, 0.9526)]),
        ],
    ))?;
    let b_black = lib(committee.score(black))?;
    let b_hate = lib(committee.score(hate))?;
    ensure!((b_black - 0.1883).abs() < 5e-5, "committee mean {b_black}");
    ensure!((b_hate - 0.9579).abs() < 5e-5, "committee mean {b_hate}");
    ensure!(!should_trigger(b_black, 0.3), "0.1883 triggered at 0.3");
    ensure!(should_trigger(b_hate, 0.3), "0.9579 did not trigger at 0.3");
    ensure!(should_trigger(0.3299, 0.3), "0.3299 did not trigger at 0.3");
    ensure!(!should_trigger(0.3, 0.3), "boundary triggered");

    let asian = "Asian students are good at math";
    let priest = "The priest gave a sermon";
    let router = TypeRouter::PerType([
        fixed("race", vec![(asian, 0.3299), (priest, 0.01)]),
        fixed("sex", vec![(asian, 0.02), (priest, 0.05)]),
        fixed("religion", vec![(asian, 0.0), (priest, 0.29)]),
        fixed("other", vec![(asian, 0.3299), (priest, 0.1)]),
    ]);
    let r = lib(router.route(asian, 0.0, 0.3))?;
    ensure!(r.triggered == vec![BiasType::Race, BiasType::Other], "triggered {:?}", r.triggered);
    ensure!(r.dominant == BiasType::Race, "dominant {:?}", r.dominant);
    let r = lib(router.route(priest, 0.0, 0.3))?;
    ensure!(r.triggered.is_empty(), "triggered {:?}", r.triggered);
    Ok(())
}

fn trigger_and_drift(runs: &ToyRuns, s: &ToyScenario) -> Check {
    router_table()?;
    let mut zero = 0;
    let mut checked = 0;
    for rec in runs.captta.iter().chain(&runs.eps0).chain(&runs.disabled) {
        let d = drift_report(rec);
        if rec.trigger_count() == 0 {
            zero += 1;
            ensure!(
                d.final_drift.to_bits() == 0f64.to_bits() && rec.final_checksum == rec.phi0_checksum,
                "{} has no trigger but drift {}",
                rec.prompt_id,
                d.final_drift
            );
        }
        ensure!(d.inequality_holds(), "{}: {:?}", rec.prompt_id, d);
        let bound = 0.25 * (rec.steps_per_round * rec.trigger_count()) as f64;
        ensure!(d.total_step_norm <= bound + 1e-12, "{}: Σ‖Δ‖ {} > {bound}", rec.prompt_id, d.total_step_norm);
        checked += 1;
    }
    let frozen = lib(frozen_scores(&runs.static_run, &s.trigger))?;
    let counts: Vec<f64> = (0..20).map(|i| frozen_trigger_rate(&frozen, i as f64 / 19.0)).collect();
    ensure!(counts.windows(2).all(|w| w[1] <= w[0]), "frozen trigger rates {counts:?}");
    Ok(format!(
        "router table ok; {checked} episodes within drift bounds, {zero} zero-trigger at zero drift; frozen rate {:.3} → {:.3} over 20 ε",
        counts[0], counts[19]
    ))
}

// 8

fn no_forgetting(s: &ToyScenario, env: &EpisodeEnv<'_>) -> Check {
    let probes = &s.probes;
    ensure!(probes.len() == 16, "{} probes", probes.len());
    let before: Vec<u64> = probes
        .iter()
        .map(|p| perplexity(&s.generator, &[], p).map(f64::to_bits))
        .collect::<CoreResult<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = EpisodeConfig {
        epsilon: 0.0,
        ..EpisodeConfig::default()
    };
    let mut session = lib(AdaptiveModel::new(s.generator.clone(), cfg.update.clone()))?;
    let mut max_drift = 0.0f64;
    for p in s.prompts.iter().take(5) {
        lib(run_episode(p, &mut session, env, &cfg, episode_seed(0, &p.id)))?;
        max_drift = max_drift.max(session.drift());
        reset_episode(&mut session);
        for (probe, want) in probes.iter().zip(&before) {
            let got = lib(perplexity(session.model(), &[], probe))?;
            ensure!(got.to_bits() == *want, "probe perplexity {got} differs after reset");
        }
    }
    ensure!(max_drift > 0.0, "episodes never moved the adapter");
    Ok(format!("16 probes bit-identical after 5 adapted episodes (max drift {max_drift:.3})"))
}

// 9

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Golden {
    static_bias: f64,
    captta_bias: f64,
    disabled_bias: f64,
    no_trigger_bias: f64,
    captta_triggers: usize,
    no_trigger_triggers: usize,
    segments: usize,
}

struct ToyRuns {
    static_run: Vec<EpisodeRecord>,
    captta: Vec<EpisodeRecord>,
    disabled: Vec<EpisodeRecord>,
    eps0: Vec<EpisodeRecord>,
    elapsed: Duration,
}

fn toy_runs(s: &ToyScenario, env: &EpisodeEnv<'_>) -> std::result::Result<ToyRuns, String> {
    let t = Instant::now();
    let run = |mode, epsilon| -> std::result::Result<Vec<EpisodeRecord>, String> {
        let cfg = EpisodeConfig {
            epsilon,
            ..EpisodeConfig::default()
        };
        let out = lib(run_prompts(&s.prompts, &s.generator, env, &cfg, mode, s.config.seed, 1))?;
        ensure!(out.failures.is_empty(), "{} failed episodes", out.failures.len());
        Ok(out.records)
    };
    Ok(ToyRuns {
        static_run: run(RunMode::Static, 0.3)?,
        captta: run(RunMode::Adaptive, 0.3)?,
        disabled: run(RunMode::Adaptive, 1.0)?,
        eps0: run(RunMode::Adaptive, 0.0)?,
        elapsed: t.elapsed(),
    })
}

fn mean_bias(records: &[EpisodeRecord], trigger: &Committee) -> std::result::Result<f64, String> {
    let scores = lib(frozen_scores(records, trigger))?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_effect.json")
}

fn end_to_end(runs: &ToyRuns, s: &ToyScenario) -> Check {
    let triggers = |r: &[EpisodeRecord]| r.iter().map(EpisodeRecord::trigger_count).sum::<usize>();
    let got = Golden {
        static_bias: mean_bias(&runs.static_run, &s.trigger)?,
        captta_bias: mean_bias(&runs.captta, &s.trigger)?,
        disabled_bias: mean_bias(&runs.disabled, &s.trigger)?,
        no_trigger_bias: mean_bias(&runs.eps0, &s.trigger)?,
        captta_triggers: triggers(&runs.captta),
        no_trigger_triggers: triggers(&runs.eps0),
        segments: runs.captta.iter().map(|r| r.segments.len()).sum(),
    };
    ensure!(got.captta_bias < got.static_bias, "captta {} ≥ static {}", got.captta_bias, got.static_bias);
    ensure!(got.captta_bias < got.disabled_bias, "captta {} ≥ ε=1 {}", got.captta_bias, got.disabled_bias);
    ensure!(
        got.captta_triggers < got.no_trigger_triggers,
        "captta triggers {} ≥ ε=0 triggers {}",
        got.captta_triggers,
        got.no_trigger_triggers
    );
    within(runs.elapsed, 600)?;
    let path = golden_path();
    if std::env::var_os("CAPTTA_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").map_err(|e| e.to_string())?;
    } else {
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let want: Golden = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        ensure!(
            close(got.static_bias, want.static_bias)
                && close(got.captta_bias, want.captta_bias)
                && close(got.disabled_bias, want.disabled_bias)
                && close(got.no_trigger_bias, want.no_trigger_bias)
                && got.captta_triggers == want.captta_triggers
                && got.no_trigger_triggers == want.no_trigger_triggers
                && got.segments == want.segments,
            "golden mismatch: got {got:?}, want {want:?}"
        );
    }
    Ok(format!(
        "bias captta {:.4} < static {:.4}, ε=1 {:.4}; triggers {} < {} (ε=0) of {} segments; 4 runs in {:.1}s",
        got.captta_bias,
        got.static_bias,
        got.disabled_bias,
        got.captta_triggers,
        got.no_trigger_triggers,
        got.segments,
        runs.elapsed.as_secs_f64()
    ))
}

// 10

fn gaussian(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); shift + z }).collect())
        .collect()
}

fn pairwise(ood: &[f64], id: &[f64]) -> f64 {
    let mut w = 0.0;
    for o in ood {
        for d in id {
            w += if o > d { 1.0 } else if o == d { 0.5 } else { 0.0 };
        }
    }
    w / (ood.len() * id.len()) as f64
}

fn ood_methodology() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let n_ood = rng.random_range(1..500);
        let n_id = rng.random_range(1..=1000 - n_ood);
        let levels = rng.random_range(2..50);
        let mut draw = |n| (0..n).map(|_| rng.random_range(0..levels) as f64).collect::<Vec<f64>>();
        let (o, d) = (draw(n_ood), draw(n_id));
        ensure!((auroc(&o, &d) - pairwise(&o, &d)).abs() <= 1e-12, "AUROC differs from pairwise oracle");
    }
    let dim = 8;
    let reference = gaussian(&mut rng, 300, dim, 0.0);
    let id = gaussian(&mut rng, 200, dim, 0.0);
    let far = gaussian(&mut rng, 200, dim, 3.0);
    let knn = |set: &[Vec<f64>]| set.iter().map(|q| knn_score(q, &reference, 5)).collect::<CoreResult<Vec<f64>>>();
    let knn_auc = auroc(&lib(knn(&far))?, &lib(knn(&id))?);
    let maha = lib(MahalanobisModel::fit(&reference, None))?;
    let m = |set: &[Vec<f64>]| set.iter().map(|q| maha.score(q)).collect::<Vec<f64>>();
    let maha_auc = auroc(&m(&far), &m(&id));
    ensure!(knn_auc > 0.95 && maha_auc > 0.95, "kNN {knn_auc}, Mahalanobis {maha_auc}");
    let mut covered = 0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        if lib(evaluate("null", &a, &b, 500, &mut rng))?.ci_covers(0.5) {
            covered += 1;
        }
    }
    ensure!(covered >= 90, "null CI covered 0.5 in {covered}/100");
    Ok(format!(
        "pairwise oracle on 100 instances; far-OOD AUROC kNN {knn_auc:.3}, Mahalanobis {maha_auc:.3}; null coverage {covered}/100"
    ))
}

// 11

fn metric_formulas() -> Check {
    ensure!(lib(fluency(1.0))? == 1.0, "fluency(1)");
    ensure!(lib(fluency(std::f64::consts::E))? == 0.5, "fluency(e)");
    for n in [2usize, 3, 4, 7, 16, 50] {
        let fmap = FeatureMap::ngram(2, n);
        let d = fmap.dim();
        let g = lib(Generator::new(vocab(n), fmap, BaseParams::zeros(n, d), lib(AdapterParams::zeros(n, d, 1, 1.0))?))?;
        let seq: Vec<usize> = (0..23).map(|i| (i * 5 + 1) % n).collect();
        let ppl = lib(perplexity(&g, &[0], &seq))?;
        ensure!(ppl == n as f64, "uniform {n}-token model has perplexity {ppl}");
    }
    let k = lib(fleiss_kappa(&[vec!['Y', 'Y', 'N'], vec!['N', 'N', 'Y']]))?;
    let kappa = k.kappa.ok_or("κ undefined")?;
    ensure!((kappa + 1.0 / 3.0).abs() <= 1e-12, "κ = {kappa}");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let len = rng.random_range(2..8);
        let sys: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let base: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let (a, c) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let sys2: Vec<f64> = sys.iter().map(|x| x + a).collect();
        let base2: Vec<f64> = base.iter().map(|x| x + c).collect();
        for j in 0..len {
            let (d0, d1) = (did(&sys, &base, j).unwrap(), did(&sys2, &base2, j).unwrap());
            ensure!((d0 - d1).abs() <= 1e-12, "DiD moved by {}", d1 - d0);
        }
    }
    Ok("fluency fixed points exact; uniform PPL = |V| exact; κ = −1/3; DiD level-invariant on 1000 trajectories".into())
}

// 12

fn cost_structure(s: &ToyScenario, env: &EpisodeEnv<'_>) -> Check {
    let mut cache = PreconditionerCache::new();
    let cfg = s.fisher_config();
    let start = estimation_count();
    lib(cache.get_or_estimate(&s.generator, &s.reference, &cfg, DEFAULT_DAMPING))?;
    let pre = lib(cache.get_or_estimate(&s.generator, &s.reference, &cfg, DEFAULT_DAMPING))?.clone();
    ensure!(cache.estimations() == 1 && estimation_count() - start == 1, "estimated more than once");

    let ep = EpisodeConfig::default();
    let env = EpisodeEnv {
        preconditioner: &pre,
        ..*env
    };
    let mut session = lib(AdaptiveModel::new(s.generator.clone(), ep.update.clone()))?;
    let before = estimation_count();
    let mut triggers = 0;
    for p in s.prompts.iter().take(40) {
        let rec = lib(run_episode(p, &mut session, &env, &ep, episode_seed(0, &p.id)))?;
        triggers += rec.trigger_count();
        reset_episode(&mut session);
    }
    ensure!(estimation_count() == before, "episodes estimated the Fisher");
    ensure!(triggers > 0, "no episode triggered");

    let n = s.generator.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let phi = s.generator.adapter().flatten();
    let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-1e-2..1e-2)).collect();
    let mut precond = lib(Updater::new(UpdateRuleConfig::default(), n))?;
    let mut adamw = lib(Updater::new(
        UpdateRuleConfig {
            kind: UpdateKind::Adamw,
            ..UpdateRuleConfig::default()
        },
        n,
    ))?;
    let mut tp = Vec::new();
    let mut ta = Vec::new();
    for _ in 0..2000 {
        let t = Instant::now();
        std::hint::black_box(lib(precond.step(&phi, &grad, &pre))?);
        tp.push(t.elapsed());
        let t = Instant::now();
        std::hint::black_box(lib(adamw.step(&phi, &grad, &pre))?);
        ta.push(t.elapsed());
    }
    tp.sort();
    ta.sort();
    let (mp, ma) = (tp[tp.len() / 2].as_secs_f64(), ta[ta.len() / 2].as_secs_f64());
    ensure!(mp <= 1.1 * ma, "precond step {mp:.2e}s > 1.1 × AdamW {ma:.2e}s");
    Ok(format!(
        "1 estimation per (model, corpus), 0 in 40 episodes ({triggers} triggers); median step precond {:.1}µs vs AdamW {:.1}µs ({n} params)",
        mp * 1e6,
        ma * 1e6
    ))
}

fn report(results: &mut Vec<bool>, name: &str, check: impl FnOnce() -> Check) {
    let t = Instant::now();
    let out = check();
    let secs = t.elapsed().as_secs_f64();
    match out {
        Ok(detail) => {
            println!("PASS  {name}: {detail} [{secs:.1}s]");
            results.push(true);
        }
        Err(why) => {
            println!("FAIL  {name}: {why} [{secs:.1}s]");
            results.push(false);
        }
    }
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, "1 trust-region closed form", trust_region);
    report(&mut results, "2 preconditioner identity", preconditioner_identity);
    report(&mut results, "3 KL-Fisher expansion", kl_fisher);
    report(&mut results, "4 gradient statistics", gradient_statistics);

    let setup = (|| -> std::result::Result<_, String> {
        let s = lib(ToyScenario::build(ScenarioConfig::default()))?;
        let est = lib(estimate_diag_fisher(&s.generator, &s.reference, &s.fisher_config()))?;
        let pre = lib(build_preconditioner(&est, DEFAULT_DAMPING))?;
        Ok((s, pre))
    })();
    let (s, pre) = match setup {
        Ok(v) => v,
        Err(e) => {
            println!("FAIL  toy scenario setup: {e}");
            return ExitCode::FAILURE;
        }
    };
    let env = EpisodeEnv {
        trigger: &s.trigger,
        router: &s.router,
        bank: &s.bank,
        preconditioner: &pre,
    };

    report(&mut results, "5 descent bound", || descent_bound(&s, &pre));
    report(&mut results, "6 KL projection", kl_projection);
    let runs = toy_runs(&s, &env);
    report(&mut results, "7 trigger and drift", || trigger_and_drift(runs.as_ref()?, &s));
    report(&mut results, "8 episodic no-forgetting", || no_forgetting(&s, &env));
    report(&mut results, "9 end-to-end toy effect", || end_to_end(runs.as_ref()?, &s));
    report(&mut results, "10 OOD methodology", ood_methodology);
    report(&mut results, "11 metric formulas", metric_formulas);
    report(&mut results, "12 cost structure", || cost_structure(&s, &env));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

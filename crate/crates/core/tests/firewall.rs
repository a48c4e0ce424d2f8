//! Episodes consult the trigger committee only; report scorers are read
//! after the run, by the evaluator.

use captta::experiment::{evaluate_records, run_prompts, RunMode};
use captta::precond::Preconditioner;
use captta::scenario::{ScenarioConfig, ToyScenario};
use captta::tta::{EpisodeConfig, EpisodeEnv};

#[test]
fn adaptive_run_never_reads_report_scores() {
    let s = ToyScenario::build(ScenarioConfig {
        prompt_count: 12,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let pre = Preconditioner::identity(s.generator.param_count());
    let env = EpisodeEnv {
        trigger: &s.trigger,
        router: &s.router,
        bank: &s.bank,
        preconditioner: &pre,
    };
    let report_before = s.report.evaluations();
    let trigger_before = s.trigger.evaluations();
    let cfg = EpisodeConfig {
        epsilon: 0.0,
        ..EpisodeConfig::default()
    };
    let out = run_prompts(&s.prompts, &s.generator, &env, &cfg, RunMode::Adaptive, 3, 2).unwrap();
    assert_eq!(out.records.len(), 12);
    assert_eq!(s.report.evaluations(), report_before);
    assert!(s.trigger.evaluations() > trigger_before);

    let trigger_after_run = s.trigger.evaluations();
    let metrics = evaluate_records(&out.records, &s.evaluator, &s.report, 2).unwrap();
    assert_eq!(metrics.len(), 12);
    assert!(s.report.evaluations() > report_before);
    assert_eq!(s.trigger.evaluations(), trigger_after_run);
}

#[test]
fn static_run_reads_no_scorer() {
    let s = ToyScenario::build(ScenarioConfig {
        prompt_count: 6,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let pre = Preconditioner::identity(s.generator.param_count());
    let env = EpisodeEnv {
        trigger: &s.trigger,
        router: &s.router,
        bank: &s.bank,
        preconditioner: &pre,
    };
    let (r, t) = (s.report.evaluations(), s.trigger.evaluations());
    let out = run_prompts(&s.prompts, &s.generator, &env, &EpisodeConfig::default(), RunMode::Static, 3, 1).unwrap();
    assert!(out.records.iter().all(|rec| rec.trigger_count() == 0 && rec.epsilon.is_none()));
    assert_eq!((s.report.evaluations(), s.trigger.evaluations()), (r, t));
}

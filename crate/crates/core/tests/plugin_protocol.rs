//! External scorer processes over line-delimited JSON.

use std::sync::Arc;
use std::time::{Duration, Instant};

use captta::genmodel::{AdapterParams, BaseParams, FeatureMap, Generator, Vocabulary};
use captta::precond::Preconditioner;
use captta::safebank::{IngestConfig, RawRecord, SafeBank};
use captta::scoring::{Committee, LexiconScorer, PluginClient, PluginScorer, Scorer, TypeRouter};
use captta::tta::{run_episode, AdaptiveModel, EpisodeConfig, EpisodeEnv, Prompt, SegmentFlag};
use captta::Error;

fn sh(script: &str) -> PluginClient {
    PluginClient::spawn("sh", &["-c".into(), script.into()], Duration::from_millis(500)).unwrap()
}

/// Answers every request with a fixed score, echoing the request id.
const ECHO: &str = r#"sed -u 's/^{"id":\([0-9]*\).*/{"id":\1,"scores":{"tox":0.75,"bias":0.25}}/'"#;

#[test]
fn echo_plugin_round_trip() {
    let client = Arc::new(sh(ECHO));
    let tox = PluginScorer::new("tox", "tox", client.clone());
    let bias = PluginScorer::new("bias", "bias", client.clone());
    for _ in 0..3 {
        assert_eq!(tox.score("anything at all").unwrap(), 0.75);
        assert_eq!(bias.score("more text").unwrap(), 0.25);
    }
    let missing = PluginScorer::new("m", "absent", client);
    assert!(matches!(missing.score("x"), Err(Error::Scoring { scorer, .. }) if scorer == "m"));
}

#[test]
fn silent_plugin_times_out() {
    let s = PluginScorer::new("slow", "tox", Arc::new(sh("sleep 30")));
    let t = Instant::now();
    let err = s.score("hello").unwrap_err();
    assert!(t.elapsed() < Duration::from_secs(5));
    assert!(matches!(err, Error::Scoring { ref message, .. } if message.contains("no response")), "{err}");
}

#[test]
fn wrong_id_is_rejected() {
    let client = sh(r#"sed -u 's/^.*$/{"id":999,"scores":{"tox":0.1}}/'"#);
    let err = client.request("x").unwrap_err();
    assert!(err.to_string().contains("does not echo"), "{err}");
}

#[test]
fn malformed_and_out_of_range_responses_fail() {
    let client = sh(r#"sed -u 's/^.*$/not json/'"#);
    assert!(client.request("x").unwrap_err().to_string().contains("malformed"));
    let s = PluginScorer::new(
        "big",
        "tox",
        Arc::new(sh(r#"sed -u 's/^{"id":\([0-9]*\).*/{"id":\1,"scores":{"tox":1.5}}/'"#)),
    );
    assert!(s.score("x").unwrap_err().to_string().contains("outside"));
}

#[test]
fn exiting_plugin_reports_closed_output() {
    let client = sh("exit 0");
    let err = client.request("x").unwrap_err();
    assert!(matches!(err, Error::Scoring { .. }), "{err}");
}

#[test]
fn failing_trigger_scorer_degrades_to_no_trigger() {
    let words = ["a", "b", "c", "."];
    let vocab = Vocabulary::with_specials(words);
    let v = vocab.len();
    let fmap = FeatureMap::ngram(2, v);
    let adapter = AdapterParams::zeros(v, fmap.dim(), 2, 2.0).unwrap();
    let model = Generator::new(vocab, fmap.clone(), BaseParams::zeros(v, fmap.dim()), adapter).unwrap();
    let dead: Arc<dyn Scorer> = Arc::new(PluginScorer::new("dead", "tox", Arc::new(sh("exit 0"))));
    let trigger = Committee::new("trigger", vec![dead]).unwrap();
    let lex = LexiconScorer::new("l", [("zzz", 1.0)]).unwrap();
    let (bank, _) = SafeBank::ingest(
        "t",
        &[RawRecord::new("a b c .", "race")],
        &[],
        &lex,
        &IngestConfig::default(),
    )
    .unwrap();
    let router = TypeRouter::CommitteeGated {
        race: lex.clone(),
        sex: lex.clone(),
        religion: lex,
    };
    let pre = Preconditioner::identity(model.param_count());
    let env = EpisodeEnv {
        trigger: &trigger,
        router: &router,
        bank: &bank,
        preconditioner: &pre,
    };
    let cfg = EpisodeConfig {
        segments: 2,
        epsilon: 0.0,
        ..EpisodeConfig::default()
    };
    let mut session = AdaptiveModel::new(model, cfg.update.clone()).unwrap();
    let rec = run_episode(&Prompt::new("p", "a b"), &mut session, &env, &cfg, 1).unwrap();
    assert_eq!(rec.trigger_count(), 0);
    assert!(session.at_phi0());
    for seg in &rec.segments {
        assert!(seg.trigger_score.is_none());
        assert!(matches!(seg.flags.as_slice(), [SegmentFlag::ScorerFailure { .. }]));
    }
}

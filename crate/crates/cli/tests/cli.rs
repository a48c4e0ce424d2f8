//! End-to-end runs of the `captta` binary on a small toy workspace.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_captta");

fn captta(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = captta(args);
    assert!(
        out.status.success(),
        "captta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    captta(args).status.code().expect("exit code")
}

/// `init` with 6 prompts and 32-token segments, plus a precomputed
/// preconditioner.
fn workspace() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("toy");
    ok(&["init", root.to_str().unwrap(), "--prompts", "6"]);
    let config = root.join("config.toml");
    let text = fs::read_to_string(&config).unwrap().replace("tokens_per_segment = 128", "tokens_per_segment = 32");
    fs::write(&config, text).unwrap();
    ok(&["precompute", "-c", config.to_str().unwrap()]);
    (dir, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn records(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run(config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["run", "-c", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn precompute_is_reproducible_and_verifiable() {
    let (_dir, config) = workspace();
    let pre = config.with_file_name("precond.json");
    let first = fs::read(&pre).unwrap();
    ok(&["precompute", "-c", s(&config)]);
    assert_eq!(fs::read(&pre).unwrap(), first);
    assert!(ok(&["precompute", "-c", s(&config), "--verify"]).contains("verified"));

    let mut v: Value = serde_json::from_slice(&first).unwrap();
    v["diag"][0] = Value::from(0.5);
    fs::write(&pre, serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(code(&["precompute", "-c", s(&config), "--verify"]), 3);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let (dir, config) = workspace();
    let out = dir.path().join("r");
    assert_eq!(code(&["run", "-c", s(&config), "--out", s(&out), "--set", "bogus=1"]), 2);
    assert_eq!(code(&["run", "-c", s(&config), "--out", s(&out), "--set", "episode.nonsense=1"]), 2);
    assert_eq!(code(&["run", "-c", s(&config), "--out", s(&out), "--epsilon", "1.5"]), 2);
    assert_eq!(code(&["run", "-c", s(&dir.path().join("absent.toml"))]), 2);
    fs::remove_file(config.with_file_name("bank.json")).unwrap();
    assert_eq!(code(&["run", "-c", s(&config), "--out", s(&out)]), 2);
}

#[test]
fn static_and_adaptive_runs() {
    let (dir, config) = workspace();
    let stat = dir.path().join("static");
    run(&config, &stat, &["--mode", "static", "--system", "static"]);
    for r in records(&stat) {
        assert!(r["epsilon"].is_null());
        for seg in r["segments"].as_array().unwrap() {
            assert!(seg["rounds"].as_array().unwrap().is_empty());
            assert_eq!(seg["drift"], 0.0);
        }
    }
    for f in ["records.jsonl", "metrics.jsonl", "summary.tsv", "summary.json", "manifest.json", "failures.json"] {
        assert!(stat.join(f).is_file(), "missing {f}");
    }

    let pre = dir.path().join("precond");
    let sgd = dir.path().join("sgd");
    run(&config, &pre, &["--epsilon", "0", "--rule", "precond"]);
    run(&config, &sgd, &["--epsilon", "0", "--rule", "sgd", "--system", "sgd"]);
    let (a, b) = (records(&pre), records(&sgd));
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["segments"][0]["text"], y["segments"][0]["text"]);
        assert_eq!(x["rule"], "precond");
        assert_eq!(y["rule"], "sgd");
    }
    assert!(a.iter().any(|r| r["trigger_rate"] == 1.0));
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let (dir, config) = workspace();
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    run(&config, &one, &["--jobs", "1"]);
    run(&config, &four, &["--jobs", "4"]);
    let strip = |mut v: Value| {
        v["update_time_s"] = Value::Null;
        v["generation_time_s"] = Value::Null;
        for seg in v["segments"].as_array_mut().unwrap() {
            seg["generation_s"] = Value::Null;
            seg["update_s"] = Value::Null;
        }
        v
    };
    let a: Vec<Value> = records(&one).into_iter().map(strip).collect();
    let b: Vec<Value> = records(&four).into_iter().map(strip).collect();
    assert_eq!(a, b);
}

#[test]
fn epsilon_ablation_rows() {
    let (dir, config) = workspace();
    let out = dir.path().join("abl");
    ok(&["ablate", "-c", s(&config), "--out", s(&out), "--axis", "epsilon", "--values", "0,0.3,1"]);
    let table = fs::read_to_string(out.join("ablate-epsilon").join("ablation.tsv")).unwrap();
    let mut rows = table.lines();
    let header: Vec<&str> = rows.next().unwrap().split('\t').collect();
    let rate = header.iter().position(|h| *h == "Trigger rate").unwrap();
    let frozen = header.iter().position(|h| *h == "frozen_trigger_rate").unwrap();
    let rows: Vec<Vec<&str>> = rows.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][1], "0");
    assert!(rows[0][rate].starts_with("1.0000±0.0000"), "{}", rows[0][rate]);
    assert!(rows[2][rate].starts_with("0.0000±0.0000"), "{}", rows[2][rate]);
    let f: Vec<f64> = rows.iter().map(|r| r[frozen].parse().unwrap()).collect();
    assert!(f[0] >= f[1] && f[1] >= f[2]);
}

#[test]
fn report_is_reproducible_and_checks_digests() {
    let (dir, config) = workspace();
    let runs = dir.path().join("runs");
    run(&config, &runs.join("static"), &["--mode", "static", "--system", "static"]);
    run(&config, &runs.join("captta"), &[]);
    let r1 = dir.path().join("rep1");
    let r2 = dir.path().join("rep2");
    ok(&["report", s(&runs), "--out", s(&r1)]);
    ok(&["report", s(&runs), "--out", s(&r2)]);
    for f in ["summary.tsv", "trajectories.tsv", "ecdf_bias.tsv", "ecdf_update_time.tsv", "did.tsv"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f} differs");
    }
    let summary = fs::read_to_string(r1.join("summary.tsv")).unwrap();
    assert!(summary.contains("static") && summary.contains("captta"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["report", s(&empty), "--out", s(&dir.path().join("rep3"))]), 0);

    let metrics = runs.join("captta").join("metrics.jsonl");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push('\n');
    fs::write(&metrics, text).unwrap();
    assert_eq!(code(&["report", s(&runs), "--out", s(&dir.path().join("rep4"))]), 3);
}

#[test]
fn plugin_scorers_match_in_process_lexicons() {
    let (dir, config) = workspace();
    let root = config.parent().unwrap();
    let text = fs::read_to_string(&config).unwrap();
    let mut plugin_text = text.clone();
    for id in ["trigger_slurs", "trigger_hostility", "trigger_demeaning"] {
        let lex = root.join("lexicons").join(format!("{id}.lex"));
        let old = format!("kind = \"lexicon\"\nid = \"{id}\"\npath = \"lexicons/{id}.lex\"");
        let new = format!(
            "kind = \"plugin\"\nid = \"{id}\"\ncommand = \"{BIN}\"\nargs = [\"serve-scorer\", \"--lexicon\", \"{id}={}\"]\nfield = \"{id}\"",
            lex.display()
        );
        assert!(plugin_text.contains(&old));
        plugin_text = plugin_text.replace(&old, &new);
    }
    let plugin_config = root.join("plugin.toml");
    fs::write(&plugin_config, plugin_text).unwrap();

    let a = dir.path().join("lex");
    let b = dir.path().join("plug");
    run(&config, &a, &["--epsilon", "0.1"]);
    run(&plugin_config, &b, &["--epsilon", "0.1"]);
    let texts = |rs: Vec<Value>| -> Vec<(Value, Value)> {
        rs.iter()
            .flat_map(|r| r["segments"].as_array().unwrap().clone())
            .map(|s| (s["text"].clone(), s["trigger_score"].clone()))
            .collect()
    };
    assert_eq!(texts(records(&a)), texts(records(&b)));
}

#[test]
fn serve_scorer_speaks_the_line_protocol() {
    let dir = TempDir::new().unwrap();
    let lex = dir.path().join("t.lex");
    fs::write(&lex, "hate\t0.8\n").unwrap();
    let mut child = Command::new(BIN)
        .args(["serve-scorer", "--lexicon", &format!("tox={}", lex.display())])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, r#"{{"id":1,"text":"I hate this"}}"#).unwrap();
        writeln!(stdin, r#"{{"id":2,"text":"calm words"}}"#).unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["id"], 1);
    assert_eq!(lines[0]["scores"]["tox"], 0.8);
    assert_eq!(lines[1]["id"], 2);
    assert_eq!(lines[1]["scores"]["tox"], 0.0);
    assert_eq!(code(&["serve-scorer", "--lexicon", "tox=/no/such/file"]), 2);
}

#[test]
fn ood_on_bundled_embeddings() {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("toy");
    ok(&["init", s(&root), "--prompts", "3"]);
    let emb = root.join("embeddings");
    let out = dir.path().join("ood");
    let stdout = ok(&[
        "ood",
        "--reference",
        s(&emb.join("reference.emb")),
        "--id",
        s(&emb.join("id.emb")),
        "--ood",
        s(&emb.join("ood.emb")),
        "--bootstrap",
        "50",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("knn") || stdout.contains("mahalanobis"), "{stdout}");
    assert!(out.join("ood.tsv").is_file() && out.join("ood.json").is_file());
}

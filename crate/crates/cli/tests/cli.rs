use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use triage_forge::sim::{FixtureIssue, ForgeSim};
use triage_forge::Fixture;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn triage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triage"))
        .args(args)
        .env_remove("TRIAGE_CONFIG")
        .env_remove("TRIAGE_FORGE_TOKEN")
        .env_remove("TRIAGE_WEBHOOK_SECRET")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = triage(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_exits_zero() {
    let out = triage(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("eval"));
}

#[test]
fn localization_json_report() {
    let file = fixture("localization_small.jsonl");
    let out = triage(&["eval", "localization", file.to_str().unwrap(), "--k", "2", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["n_examples"], 3);
    for key in ["p_at_k", "r_at_k", "map"] {
        assert!(v.get(key).is_some(), "missing {key}: {v}");
    }
    let p2 = v["p_at_k"]["2"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p2));
    assert_eq!(v["flags"][0], "accuracy_is_hit_at_2");
}

#[test]
fn duplicate_fixture_table() {
    let file = fixture("duplicate_pairs_30.jsonl");
    let out = triage(&["eval", "duplicates", file.to_str().unwrap(), "--threshold", "0.6"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("examples    30"), "{text}");
    assert!(text.contains("precision   1.0000"), "{text}");
    assert!(text.contains("recall      1.0000"), "{text}");
}

#[test]
fn malformed_line_is_a_data_error_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"issue_a\": {\"title\": \"a\"}, \"issue_b\": {\"title\": \"b\"}, \"is_duplicate\": true}\n{not json\n",
    )
    .unwrap();
    let out = triage(&["eval", "duplicates", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn unknown_severity_class_names_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sev.jsonl");
    std::fs::write(&path, "{\"title\": \"t\", \"severity\": \"Catastrophic\"}\n").unwrap();
    let out = triage(&["eval", "severity", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Catastrophic"), "{}", stderr(&out));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let out = triage(&["eval", "severity", "/nonexistent/data.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_flags_are_usage_errors() {
    let file = fixture("duplicate_pairs_30.jsonl");
    let out = triage(&["eval", "duplicates", file.to_str().unwrap(), "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = triage(&["eval", "localization", file.to_str().unwrap(), "--k", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trained_model_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let seed = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/severity_seed.jsonl");
    let out = triage(&["train-severity", seed.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("Blocker"));

    let data = fixture("severity_small.jsonl");
    let with_model = triage(&["eval", "severity", data.to_str().unwrap(), "--model", model.to_str().unwrap(), "--json"]);
    let seeded = triage(&["eval", "severity", data.to_str().unwrap(), "--json"]);
    assert_eq!(with_model.status.code(), Some(0), "{}", stderr(&with_model));
    assert_eq!(stdout(&with_model), stdout(&seeded));
}

#[test]
fn training_without_every_class_is_a_data_error() {
    let out = triage(&["train-severity", fixture("severity_small.jsonl").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no training examples"), "{}", stderr(&out));
}

#[test]
fn status_without_config_is_a_runtime_error() {
    let out = triage(&["status", "--config", "/nonexistent/triage.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn install_then_status_against_the_mock_forge() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut fx = Fixture::default();
    for i in 1..=12 {
        fx.issues.push(FixtureIssue {
            number: None,
            title: format!("issue {i}"),
            body: None,
            state: "open".into(),
            created_at: None,
            labels: vec![],
            pull_request: false,
        });
    }
    let sim = Arc::new(ForgeSim::seed(&fx, "s"));
    let server = rt.block_on(sim.serve("127.0.0.1:0".parse().unwrap())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("triage.toml");
    std::fs::write(
        &config,
        format!(
            "[forge]\napi_base_url = \"{}\"\nhtml_base_url = \"https://forge.test\"\npage_size = 5\n\n[store]\npath = \"{}\"\n",
            server.base_url(),
            dir.path().join("triage.db").display()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();

    // The CLI blocks on the simulator, which runs on this runtime's workers.
    let out = triage(&["install", "octo/widgets", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("12 issues indexed"), "{}", stdout(&out));

    let out = triage(&["status", "--json", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["repositories"][0]["issue_count"], 12);
    assert_eq!(v["repositories"][0]["backfill_complete"], true);

    let out = triage(&["install", "not-a-slug", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    drop(server);
}

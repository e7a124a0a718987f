//! Drives the `cpvaudit` binary end to end against the mock provider.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cpvaudit");
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/cases.jsonl");

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let corpus = Path::new(FIXTURE).canonicalize().unwrap();
    let text = format!(
        r#"
name = "cli"
corpus = "{}"
seed = 5
prompt_kinds = ["Q"]
analysis.shap_min_df = 2
{body}

[embedding]
source = "mock"
dimension = 16

[[models]]
provider = "mock"
model_id = "planted"

[models.mock]
seed = 2
[models.mock.accuracy_by_group]
Male = 0.7
Female = 0.5
Neutral = 0.6
"#,
        corpus.display()
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn cpvaudit(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(config.parent().unwrap())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_report_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = cpvaudit(&cfg, &["run"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["completed"], 36);

    let again = cpvaudit(&cfg, &["run"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(summary["provider_calls"], 0);

    let report = cpvaudit(&cfg, &["report"]);
    assert_eq!(report.status.code(), Some(0), "{}", String::from_utf8_lossy(&report.stderr));
    assert!(tmp.path().join("runs/cli/report/summary.md").is_file());
}

#[test]
fn preparation_subcommands_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    for (args, file) in [
        (vec!["ingest"], "corpus.jsonl"),
        (vec!["extract"], "features.jsonl"),
        (vec!["cpv"], "variants.jsonl"),
        (vec!["embed-direction"], "direction.json"),
        (vec!["export-ft", "--paradigm", "xpl", "--split", "train"], "ft/xpl_train.jsonl"),
    ] {
        let out = cpvaudit(&cfg, &args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(tmp.path().join("runs/cli").join(file).is_file(), "{args:?} -> {file}");
    }
    let cpv = stdout(&cpvaudit(&cfg, &["cpv"]));
    assert!(cpv.contains("36 variants from 12 cases"), "{cpv}");
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = cpvaudit(&cfg, &["export-ft", "--balance", "--seed", "1", "--output", "a"]);
    let b = cpvaudit(&cfg, &["export-ft", "--balance", "--seed", "1", "--output", "b"]);
    assert!(a.status.success() && b.status.success());
    let manifest = std::fs::read_to_string(tmp.path().join("a/mcq_train.manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 1"), "{manifest}");
    assert_eq!(
        std::fs::read(tmp.path().join("a/mcq_train.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("b/mcq_train.jsonl")).unwrap()
    );
}

#[test]
fn metrics_and_shap_write_report_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    assert!(cpvaudit(&cfg, &["run"]).status.success());
    assert!(cpvaudit(&cfg, &["metrics"]).status.success());
    assert!(cpvaudit(&cfg, &["shap"]).status.success());
    let report = tmp.path().join("runs/cli/report");
    for f in ["metrics.csv", "eo_cv.csv", "skewsize.csv", "shap_top5.csv"] {
        assert!(report.join(f).is_file(), "{f}");
    }
}

#[test]
fn bias_emit_requests_writes_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    assert!(cpvaudit(&cfg, &["run"]).status.success());
    let req = tmp.path().join("requests.jsonl");
    let out = cpvaudit(&cfg, &["bias", "--emit-requests", req.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&req).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["id"].is_string() && first["text"].is_string());
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cpvaudit(&tmp.path().join("nope.toml"), &["run"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x y\"\ncorpus = \"c.jsonl\"\nmodels = []\n").unwrap();
    assert_eq!(cpvaudit(&bad, &["run"]).status.code(), Some(1));
}

#[test]
fn provider_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = Path::new(FIXTURE).canonicalize().unwrap();
    let text = format!(
        r#"
name = "failing"
corpus = "{}"
seed = 5

[gateway.retry]
max_retries = 0
base_delay_ms = 1
max_delay_ms = 1

[[models]]
provider = "openai_compatible"
model_id = "unreachable"
endpoint = "http://127.0.0.1:9"
api_key_env = "CPVAUDIT_TEST_KEY"
"#,
        corpus.display()
    );
    let cfg = tmp.path().join("experiment.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = Command::new(BIN)
        .env("CPVAUDIT_TEST_KEY", "k")
        .args(["--config", cfg.to_str().unwrap(), "run", "--limit", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let errors = std::fs::read_to_string(tmp.path().join("runs/failing/errors.jsonl")).unwrap();
    assert_eq!(errors.lines().count(), 2);
}

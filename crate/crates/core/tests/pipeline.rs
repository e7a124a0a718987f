//! End-to-end runs against the mock provider: execution, resume, report.

use std::path::{Path, PathBuf};

use cpvaudit::orchestrator::report::{embedding_request_texts, generate_report};
use cpvaudit::orchestrator::{run_experiment, ExperimentConfig, ResultsStore, RunOptions};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/cases.jsonl");

fn config_text(name: &str, extra: &str) -> String {
    format!(
        r#"
name = "{name}"
corpus = "{FIXTURE}"
seed = 11
prompt_kinds = ["Q", "QIF", "NoOptions", "FTXPL", "BiasRelevance"]
max_parallel_requests = 4
analysis.analyses = ["accuracy", "eo_cv", "skewsize", "shap", "embed_bias", "ablation", "wordcloud"]
analysis.shap_min_df = 2
{extra}

[embedding]
source = "mock"
dimension = 16

[[models]]
provider = "mock"
model_id = "planted"

[models.mock]
seed = 3
[models.mock.accuracy_by_group]
Male = 0.9
Female = 0.4
Neutral = 0.6
"#
    )
}

fn config(dir: &Path, name: &str, extra: &str) -> ExperimentConfig {
    let cfg = ExperimentConfig::from_toml_str(&config_text(name, extra), dir).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn full_run_produces_one_record_per_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "full", "");
    let s = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(s.cases, 12);
    assert_eq!(s.variants, 36, "{s:?}");
    assert_eq!(s.planned, 36 * 5);
    assert_eq!(s.completed, s.planned);
    assert_eq!(s.failed, 0);
    assert_eq!(s.exit_code(), 0);
    let store = ResultsStore::open(&s.run_dir).unwrap();
    assert_eq!(store.len(), s.planned);
    assert!(store.records().any(|r| r.relevance_score.is_some()));
    assert!(store.records().any(|r| r.word_overlap.is_some()));

    // Second invocation is a no-op.
    let again = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(again.already_stored, s.planned);
    assert_eq!(again.completed, 0);
    assert_eq!(again.provider_calls, 0);
}

#[test]
fn interrupted_run_resumes_to_identical_store() {
    let tmp = tempfile::tempdir().unwrap();
    let full = config(tmp.path(), "straight", "");
    let s = run_experiment(&full, RunOptions::default()).unwrap();
    let expected = ResultsStore::open(&s.run_dir).unwrap().canonical_bytes();

    let split = config(tmp.path(), "split", "");
    let first = run_experiment(&split, RunOptions { limit: Some(37) }).unwrap();
    assert_eq!(first.completed, 37);
    let second = run_experiment(&split, RunOptions::default()).unwrap();
    assert_eq!(second.already_stored, 37);
    assert_eq!(second.completed, s.planned - 37);
    assert_eq!(second.provider_calls, s.planned - 37);
    let resumed = ResultsStore::open(&second.run_dir).unwrap().canonical_bytes();
    assert_eq!(resumed, expected);
}

#[test]
fn report_is_byte_stable_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "report", "");
    run_experiment(&cfg, RunOptions::default()).unwrap();
    let first = generate_report(&cfg).unwrap();
    let bytes = read_dir_sorted(&first.report_dir);
    let second = generate_report(&cfg).unwrap();
    assert_eq!(first.files, second.files);
    assert_eq!(bytes, read_dir_sorted(&second.report_dir));

    for f in [
        "metrics.csv",
        "metrics.json",
        "delta_gender_Q.csv",
        "eo_cv.csv",
        "skewsize.csv",
        "shap_top5.csv",
        "shap.json",
        "direction.json",
        "median_bias.csv",
        "ablation.csv",
        "wordcloud.csv",
        "relevance.csv",
        "word_overlap.csv",
        "summary.md",
    ] {
        assert!(first.files.iter().any(|x| x == f), "missing {f}: {:?}", first.files);
    }
    let eo_cv = std::fs::read_to_string(first.report_dir.join("eo_cv.csv")).unwrap();
    assert!(eo_cv.starts_with("model_id,prompt_kind,attribute,overall,eo,cv\n"));
    let delta = std::fs::read_to_string(first.report_dir.join("delta_gender_Q.csv")).unwrap();
    assert_eq!(delta.lines().next(), Some("group_i,group_j,planted"));
    assert_eq!(delta.lines().count(), 4, "three gender pairs plus header");
}

#[test]
fn embed_bias_without_embedding_section_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config_text("noembed", "").replace("[embedding]\nsource = \"mock\"\ndimension = 16\n", "");
    let cfg = ExperimentConfig::from_toml_str(&text, tmp.path()).unwrap();
    run_experiment(&cfg, RunOptions { limit: Some(5) }).unwrap();
    let err = generate_report(&cfg).unwrap_err();
    assert!(err.to_string().contains("embed_bias"), "{err}");
}

#[test]
fn embedding_requests_cover_pairs_and_explanations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "requests", "");
    run_experiment(&cfg, RunOptions::default()).unwrap();
    let texts = embedding_request_texts(&cfg, &cfg.run_dir()).unwrap();
    assert!(texts.windows(2).all(|w| w[0] < w[1]), "sorted and unique");
    assert!(texts.iter().any(|t| t == "she is here"));
    assert!(!texts.iter().any(|t| t == "he"), "gender words are excluded");
}

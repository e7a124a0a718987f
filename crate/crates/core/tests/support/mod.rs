//! Helpers shared by the integration test targets: synthetic corpora,
//! mock experiment configs and the randomized invariant checks.

#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

use cpvaudit::corpus::{ingest_str, save_jsonl, ClinicalCase, CorpusFormat};
use cpvaudit::demographics::{BiasAttribute, Gender, Label};
use cpvaudit::embedbias::{
    bias_components, compute_gender_direction, median_bias_score, tfidf_importance, BiasResult, BiasScorer,
    EmbeddingSource, Orientation, SeededMock,
};
use cpvaudit::extraction::shuffle_options;
use cpvaudit::orchestrator::{run_experiment, ExperimentConfig, ResultsStore, RunOptions};
use cpvaudit::parsing::ParseStatus;
use cpvaudit::prompting::TemplateKind;
use cpvaudit::statmetrics::{accuracy_delta, coefficient_of_variation, equality_of_odds, OutcomeRecord};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};

pub const FIXTURE: &str = include_str!("../fixtures/cases.jsonl");

pub fn fixture_cases() -> Vec<ClinicalCase> {
    ingest_str(FIXTURE, CorpusFormat::Jsonl).unwrap()
}

/// The fixture corpus repeated to `n` cases with distinct ids.
pub fn synthetic_corpus(n: usize) -> Vec<ClinicalCase> {
    let base = fixture_cases();
    (0..n)
        .map(|i| {
            let mut c = base[i % base.len()].clone();
            c.id = format!("{}-{i:05}", c.id);
            c
        })
        .collect()
}

/// Writes a synthetic corpus and a gender-only mock experiment config.
/// `accuracies` maps group keys (`Male`, `Female`, `Neutral`, `Any`) to the
/// planted probability of answering correctly.
pub fn mock_experiment(dir: &Path, name: &str, n_cases: usize, accuracies: &[(&str, f64)], mock_seed: u64) -> ExperimentConfig {
    let corpus = dir.join(format!("{name}_cases.jsonl"));
    save_jsonl(&corpus, &synthetic_corpus(n_cases)).unwrap();
    let groups: String = accuracies.iter().map(|(g, p)| format!("{g} = {p}\n")).collect();
    let text = format!(
        r#"
name = "{name}"
corpus = "{corpus}"
seed = 17
prompt_kinds = ["Q"]
max_parallel_requests = 8

[gateway]
cache = false

[[models]]
provider = "mock"
model_id = "planted"

[models.mock]
seed = {mock_seed}
[models.mock.accuracy_by_group]
{groups}
"#,
        corpus = corpus.display()
    );
    let cfg = ExperimentConfig::from_toml_str(&text, dir).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Runs a mock experiment to completion and returns its outcomes.
pub fn run_mock(cfg: &ExperimentConfig) -> Vec<OutcomeRecord> {
    let summary = run_experiment(cfg, RunOptions::default()).unwrap();
    assert_eq!(summary.failed, 0);
    ResultsStore::open(&summary.run_dir).unwrap().outcomes()
}

/// Canonical store bytes of a straight run and of a run interrupted after
/// `cut` requests and then resumed.
pub fn straight_and_resumed(dir: &Path, cut: usize) -> (Vec<u8>, Vec<u8>, usize) {
    let accuracies = [("Male", 0.7), ("Female", 0.55), ("Neutral", 0.6)];
    let a = mock_experiment(dir, "straight", 40, &accuracies, 9);
    let sa = run_experiment(&a, RunOptions::default()).unwrap();
    let b = mock_experiment(dir, "resumed", 40, &accuracies, 9);
    run_experiment(&b, RunOptions { limit: Some(cut) }).unwrap();
    let sb = run_experiment(&b, RunOptions::default()).unwrap();
    (
        ResultsStore::open(&sa.run_dir).unwrap().canonical_bytes(),
        ResultsStore::open(&sb.run_dir).unwrap().canonical_bytes(),
        sb.provider_calls,
    )
}

// ---------------------------------------------------------------------------
// Randomized invariants

pub const PROPERTY_CASES: u32 = 1000;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn outcome(gender: Gender, correct: bool, gold: usize) -> OutcomeRecord {
    let gold = Label::from_index(gold).unwrap();
    OutcomeRecord {
        variant_id: String::new(),
        base_id: String::new(),
        gender,
        ethnicity: None,
        model_id: "m".into(),
        prompt_kind: TemplateKind::Q,
        predicted: correct.then_some(gold),
        gold,
        correct,
        explanation: String::new(),
        parse_status: ParseStatus::Clean,
    }
}

/// Outcome sets where every gender group has at least one record.
fn outcomes() -> impl Strategy<Value = Vec<OutcomeRecord>> {
    let gender = prop_oneof![Just(Gender::Male), Just(Gender::Female), Just(Gender::Neutral)];
    prop::collection::vec((gender, any::<bool>(), 0usize..4), 0..60).prop_map(|mut rs| {
        for g in Gender::ALL {
            rs.push((g, true, 0));
        }
        rs.into_iter().map(|(g, c, l)| outcome(g, c, l)).collect()
    })
}

fn accuracies() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1.0f64..100.0, 2..12)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// Δ(i, j) = −Δ(j, i) for every pair of groups.
pub fn delta_antisymmetry(cases: u32) -> Result<(), TestError<Vec<OutcomeRecord>>> {
    runner(cases).run(&outcomes(), |rs| {
        let groups = BiasAttribute::Gender.groups();
        for i in &groups {
            for j in &groups {
                let ij = accuracy_delta(i, j, &rs).unwrap();
                let ji = accuracy_delta(j, i, &rs).unwrap();
                prop_assert_eq!(ij, -ji);
            }
        }
        Ok(())
    })
}

/// EO and CV do not depend on the order of the groups.
pub fn eo_cv_permutation_invariance(cases: u32) -> Result<(), TestError<(Vec<f64>, Vec<f64>)>> {
    let pairs = accuracies().prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    runner(cases).run(&pairs, |(accs, perm)| {
        prop_assert_eq!(equality_of_odds(&accs).unwrap(), equality_of_odds(&perm).unwrap());
        let (a, b) = (coefficient_of_variation(&accs).unwrap(), coefficient_of_variation(&perm).unwrap());
        prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b);
        Ok(())
    })
}

/// CV(c·a) = CV(a) for any positive scale c.
pub fn cv_scale_invariance(cases: u32) -> Result<(), TestError<(Vec<f64>, f64)>> {
    runner(cases).run(&(accuracies(), 0.01f64..100.0), |(accs, c)| {
        let scaled: Vec<f64> = accs.iter().map(|a| a * c).collect();
        let (a, b) = (coefficient_of_variation(&accs).unwrap(), coefficient_of_variation(&scaled).unwrap());
        prop_assert!(close(a, b, 1e-9), "{} vs {}", a, b);
        Ok(())
    })
}

/// male_bias_score ≤ 0 ≤ female_bias_score, both for raw word
/// contributions and for whole texts scored against a seeded embedding.
pub fn bias_score_signs(cases: u32) -> Result<(), TestError<(Vec<(f64, f64)>, Vec<String>)>> {
    let contribution = (-1.0f64..=1.0, 0.0f64..5.0);
    let words = prop::collection::vec("[a-z]{2,8}", 1..30);
    let source = EmbeddingSource::SeededMock(SeededMock::new(8, 5));
    let diffs: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..8).map(|j| if j == 0 { 1.0 } else { 0.1 * ((i + j) % 3) as f64 }).collect())
        .collect();
    let direction = compute_gender_direction(&diffs, Orientation::FirstPair, None).unwrap();
    let excluded = HashSet::new();
    runner(cases).run(&(prop::collection::vec(contribution, 0..50), words), |(contribs, words)| {
        let (male, female) = bias_components(contribs.iter().map(|(cos, imp)| cos * imp));
        prop_assert!(male <= 0.0 && female >= 0.0, "male {} female {}", male, female);
        let neg: f64 = contribs.iter().map(|(c, i)| c * i).filter(|x| *x < 0.0).sum();
        prop_assert!(close(male, neg, 1e-12));

        let text = words.join(" ");
        let importance = tfidf_importance(&[text.as_str()]);
        let scorer = BiasScorer {
            direction: &direction,
            importance: &importance,
            excluded: &excluded,
            source: &source,
            window_tokens: 68,
            window_step: 32,
        };
        let r = scorer.score(&text).unwrap();
        prop_assert!(r.male_bias_score <= 0.0 && r.female_bias_score >= 0.0, "{:?}", r);
        Ok(())
    })
}

/// The corpus median bias score of one case is that case's own score.
pub fn median_bias_identity(cases: u32) -> Result<(), TestError<(f64, f64, f64)>> {
    runner(cases).run(&(-100.0f64..=0.0, 0.0f64..100.0, -1.0f64..1.0), |(male, female, gb)| {
        let r = BiasResult {
            gender_bias: gb,
            male_bias_score: male,
            female_bias_score: female,
            median_bias_score: (male + female) / 2.0,
            missing_importance: Vec::new(),
        };
        prop_assert_eq!(median_bias_score(std::slice::from_ref(&r)), Some((male + female) / 2.0));
        Ok(())
    })
}

/// Option shuffling keeps the gold answer's text and the option multiset.
pub fn shuffle_keeps_gold(cases: u32) -> Result<(), TestError<(usize, u64)>> {
    let base = fixture_cases();
    runner(cases).run(&(0..base.len(), any::<u64>()), |(i, seed)| {
        let c = &base[i];
        let s = shuffle_options(c, seed);
        prop_assert_eq!(s.gold_text(), c.gold_text());
        let mut a = s.options.to_vec();
        let mut b = c.options.to_vec();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert_eq!(shuffle_options(c, seed), s);
        Ok(())
    })
}

pub fn to_case_error<T: std::fmt::Debug>(r: Result<(), TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{e}"))
}

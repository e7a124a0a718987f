//! Resumable experiment execution.
//!
//! Every (variant × model × prompt kind) key is rendered, sent through the
//! gateway, parsed and appended to the store. Keys already in the store are
//! skipped, so an interrupted run resumes where it stopped. Requests run on
//! a bounded pool of worker threads; one writer (the calling thread)
//! receives their results over a channel and appends them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::store::{ErrorRecord, RecordKey, ResultsStore, RunRecord};
use crate::corpus::{ingest_cases, ClinicalCase, CorpusError};
use crate::cpv::{build_cpv_with, save_variants, CaseVariant, CpvFailure};
use crate::demographics::Label;
use crate::exec::ExecMode;
use crate::extraction::{shuffle_options, CaseFeatures};
use crate::gateway::{Gateway, GatewayError, ModelSpec, RawResponse, RequestMeta};
use crate::parsing::{parse_mcq, parse_rating, split_free_answer, ParseStatus};
use crate::prompting::{extra, render, solution_text, ChatPrompt, PromptError, TemplateKind, TemplateSet};
use crate::statmetrics::{exact_match, word_overlap, OutcomeRecord};

pub const VARIANTS_FILE: &str = "variants.jsonl";
pub const CPV_FAILURES_FILE: &str = "cpv_failures.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("template: {0}")]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: configuration and input problems are 1.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this many new requests (for smoke runs and tests).
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub cases: usize,
    pub filtered_cases: usize,
    pub variants: usize,
    pub cpv_failures: usize,
    pub planned: usize,
    pub already_stored: usize,
    pub completed: usize,
    pub failed: usize,
    pub provider_calls: usize,
}

impl RunSummary {
    /// 0 when every attempted key succeeded, 2 when error records remain.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 {
            2
        } else {
            0
        }
    }
}

/// Corpus, features, filtered cases and CPVs for a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cases: Vec<ClinicalCase>,
    pub features: Vec<CaseFeatures>,
    pub filtered: Vec<ClinicalCase>,
    pub variants: Vec<CaseVariant>,
    pub failures: Vec<CpvFailure>,
}

pub fn prepare(config: &ExperimentConfig, mode: ExecMode) -> Result<Prepared, RunError> {
    let rules = config.rules()?;
    let cases = ingest_cases(&config.resolve(&config.corpus), config.corpus_format()?)?;
    let features: Vec<CaseFeatures> = crate::exec::map_collect(mode, &cases, |c| rules.extract_features(c));
    let filtered = crate::cpv::filter_corpus(&cases, &features, &config.filter)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let filtered: Vec<ClinicalCase> = if config.shuffle_options {
        filtered.iter().map(|c| shuffle_options(c, config.seed)).collect()
    } else {
        filtered
    };
    let ethnicities = config.cpv.ethnicity_list()?;
    let out = build_cpv_with(&rules, mode, &filtered, &config.cpv.genders, &ethnicities);
    Ok(Prepared {
        cases,
        features,
        filtered,
        variants: out.variants,
        failures: out.failures,
    })
}

/// Renders the prompt for one key.
pub fn prompt_for(
    templates: &TemplateSet,
    variant: &CaseVariant,
    kind: TemplateKind,
    config: &ExperimentConfig,
) -> Result<ChatPrompt, PromptError> {
    let extras = match kind {
        TemplateKind::BiasRelevance => extra(&[("SPECIFIC", config.analysis.relevance_attribute.as_str())]),
        TemplateKind::FTXPL => extra(&[("SOLUTION", &solution_text(&variant.case))]),
        _ => BTreeMap::new(),
    };
    render(templates.get(kind), variant, &extras)
}

pub fn request_meta(variant: &CaseVariant) -> RequestMeta {
    RequestMeta {
        variant_id: variant.variant_id.clone(),
        gender: Some(variant.spec.gender),
        ethnicity: variant.spec.ethnicity,
        gold: Some(variant.case.gold()),
        options: Some(variant.case.options.clone()),
    }
}

fn option_label(answer: &str, options: &[String; 4]) -> Option<Label> {
    options
        .iter()
        .position(|o| exact_match(answer, o))
        .and_then(Label::from_index)
}

/// Turns a model response into a stored record.
pub fn score_response(
    variant: &CaseVariant,
    model: &ModelSpec,
    kind: TemplateKind,
    prompt: &ChatPrompt,
    response: &RawResponse,
) -> RunRecord {
    let gold = variant.case.gold();
    let text = &response.text;
    let mut relevance_score = None;
    let mut overlap = None;
    let (predicted, correct, explanation, parse_status) = match kind {
        TemplateKind::BiasRelevance => match parse_rating(text) {
            Ok(r) => {
                relevance_score = Some(r.score);
                (None, false, r.explanation, ParseStatus::Clean)
            }
            Err(_) => (None, false, text.trim().to_string(), ParseStatus::Unparsed),
        },
        TemplateKind::NoOptions => {
            let (_, expl) = split_free_answer(text);
            let predicted = option_label(text, &variant.case.options);
            let status = if predicted.is_some() {
                ParseStatus::Clean
            } else {
                ParseStatus::Unparsed
            };
            (predicted, exact_match(text, variant.case.gold_text()), expl, status)
        }
        TemplateKind::FTXPL => {
            overlap = Some(word_overlap(text, &variant.case.explanation));
            (None, false, text.trim().to_string(), ParseStatus::Clean)
        }
        _ => {
            let p = parse_mcq(text);
            (p.label, p.label == Some(gold), p.explanation, p.parse_status)
        }
    };
    RunRecord {
        outcome: OutcomeRecord {
            variant_id: variant.variant_id.clone(),
            base_id: variant.base_id.clone(),
            gender: variant.spec.gender,
            ethnicity: variant.spec.ethnicity,
            model_id: model.model_id.clone(),
            prompt_kind: kind,
            predicted,
            gold,
            correct,
            explanation,
            parse_status,
        },
        temperature: model.temperature,
        content_hash: prompt.content_hash.clone(),
        response: text.clone(),
        relevance_score,
        word_overlap: overlap,
        token_usage: response.token_usage,
    }
}

struct WorkItem<'a> {
    key: RecordKey,
    variant: &'a CaseVariant,
    model: &'a ModelSpec,
    prompt: ChatPrompt,
}

/// Runs (or resumes) an experiment.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<RunSummary, RunError> {
    run_with_gateway(config, options, None)
}

/// As [`run_experiment`], with an explicit gateway (for sharing a call
/// counter or cache across runs).
pub fn run_with_gateway(
    config: &ExperimentConfig,
    options: RunOptions,
    gateway: Option<&Gateway>,
) -> Result<RunSummary, RunError> {
    let prepared = prepare(config, ExecMode::default())?;
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    save_variants(&run_dir.join(VARIANTS_FILE), &prepared.variants)?;
    let mut failures = Vec::new();
    for f in &prepared.failures {
        failures.extend(serde_json::to_vec(f).map_err(std::io::Error::from)?);
        failures.push(b'\n');
    }
    std::fs::write(run_dir.join(CPV_FAILURES_FILE), failures)?;

    let templates = config.templates()?;
    let mut store = ResultsStore::open(&run_dir)?;
    let mut items = Vec::new();
    let mut already_stored = 0;
    for variant in &prepared.variants {
        for model in &config.models {
            for &kind in &config.prompt_kinds {
                let key = RecordKey {
                    variant_id: variant.variant_id.clone(),
                    model_id: model.model_id.clone(),
                    prompt_kind: kind,
                };
                if store.contains(&key) && !config.overwrite {
                    already_stored += 1;
                    continue;
                }
                items.push(WorkItem {
                    prompt: prompt_for(&templates, variant, kind, config)?,
                    key,
                    variant,
                    model,
                });
            }
        }
    }
    let planned = items.len() + already_stored;
    items.sort_by(|a, b| a.key.cmp(&b.key));
    if let Some(limit) = options.limit {
        items.truncate(limit);
    }

    let owned;
    let gateway = match gateway {
        Some(g) => g,
        None => {
            owned = Gateway::new(config.gateway_config())?;
            &owned
        }
    };
    let calls_before = gateway.provider_calls();
    let next = AtomicUsize::new(0);
    let workers = config.max_parallel_requests.min(items.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Result<RawResponse, GatewayError>)>();
    let mut completed = 0;
    let mut failed = 0;
    let mut write_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (items, next) = (&items, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let result = gateway.complete(item.model, &item.prompt, &request_meta(item.variant));
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            let item = &items[i];
            let outcome = match result {
                Ok(resp) => {
                    let record = score_response(item.variant, item.model, item.key.prompt_kind, &item.prompt, &resp);
                    completed += 1;
                    store.append(&record)
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("{}: {e}", item.key);
                    store.append_error(&ErrorRecord {
                        key: item.key.clone(),
                        content_hash: e.content_hash().to_string(),
                        error: e.to_string(),
                    })
                }
            };
            if let Err(e) = outcome {
                write_error.get_or_insert(e);
                // Stop handing out work; in-flight requests drain.
                next.store(items.len(), Ordering::Relaxed);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e.into());
    }
    if config.overwrite {
        store.compact()?;
    }
    Ok(RunSummary {
        run_dir,
        cases: prepared.cases.len(),
        filtered_cases: prepared.filtered.len(),
        variants: prepared.variants.len(),
        cpv_failures: prepared.failures.len(),
        planned,
        already_stored,
        completed,
        failed,
        provider_calls: gateway.provider_calls() - calls_before,
    })
}

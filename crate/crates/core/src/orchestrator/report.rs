//! Report generation from a run directory.
//!
//! Everything is written under `<run>/report/`. Output is byte-stable for
//! a given store: maps are ordered, floats use fixed precision and nothing
//! time-dependent is recorded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{Analysis, ConfigError, ExperimentConfig};
use super::run::VARIANTS_FILE;
use super::store::{ResultsStore, RunRecord};
use crate::corpus::CorpusError;
use crate::cpv::{load_variants, CaseVariant};
use crate::demographics::{BiasAttribute, GroupKey};
use crate::embedbias::{
    aggregate_bias, bias_heatmap, direction_from_pairs, median_bias_score, tfidf_importance, AggregateBy, BiasCell,
    BiasHeatmap, BiasScorer, BiasTable, EmbedError, GenderDirection, ScoredCase,
};
use crate::exec::ExecMode;
use crate::prompting::TemplateKind;
use crate::statmetrics::{
    accuracy_delta, compute_metrics, content_words, write_metrics_csv, MetricsError, MetricsTable, OutcomeRecord,
};
use crate::wordshap::{build_vocab_matrix, fit_surrogate, shap_values, write_impacts_csv, FeatureImpact, ShapError};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{analysis} needs {missing}")]
    MissingAnalysisInput { analysis: Analysis, missing: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a report run produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub report_dir: PathBuf,
    /// Files written, relative to the report directory, sorted.
    pub files: Vec<String>,
    /// Analyses or slices skipped, with the reason.
    pub notes: Vec<String>,
}

/// Records of one (model, prompt kind) slice.
type Slices = BTreeMap<(String, TemplateKind), Vec<RunRecord>>;

fn slices(store: &ResultsStore) -> Slices {
    let mut out: Slices = BTreeMap::new();
    for r in store.records() {
        out.entry((r.outcome.model_id.clone(), r.outcome.prompt_kind))
            .or_default()
            .push(r.clone());
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.outcome.variant_id.cmp(&b.outcome.variant_id));
    }
    out
}

/// Kinds whose records carry a correctness judgement.
pub fn is_graded(kind: TemplateKind) -> bool {
    kind.expects_label() || kind == TemplateKind::NoOptions
}

/// Model ids may contain `/` or `:`; file names keep `[A-Za-z0-9._-]`.
pub fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

struct Writer {
    dir: PathBuf,
    files: BTreeSet<String>,
}

impl Writer {
    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), ReportError> {
        std::fs::write(self.dir.join(name), data)?;
        self.files.insert(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ReportError> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, &data)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let data = w.into_inner().map_err(|e| e.into_error())?;
        self.bytes(name, &data)
    }
}

/// Loads the stored state of a run and writes the configured analyses.
pub fn generate_report(config: &ExperimentConfig) -> Result<ReportSummary, ReportError> {
    generate_report_in(config, &config.run_dir())
}

pub fn generate_report_in(config: &ExperimentConfig, run_dir: &Path) -> Result<ReportSummary, ReportError> {
    let variants = load_variants(&run_dir.join(VARIANTS_FILE))?;
    let store = ResultsStore::open(run_dir)?;
    let dir = run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut out = Writer {
        dir: dir.clone(),
        files: BTreeSet::new(),
    };
    let mut notes = Vec::new();
    let slices = slices(&store);
    let by_id: HashMap<&str, &CaseVariant> = variants.iter().map(|v| (v.variant_id.as_str(), v)).collect();

    let tables = metrics_tables(config, &slices, &mut notes)?;
    let analyses: BTreeSet<Analysis> = config.analysis.analyses.iter().copied().collect();
    for analysis in &analyses {
        match analysis {
            Analysis::Accuracy => accuracy_report(config, &slices, &tables, &mut out)?,
            Analysis::EoCv => eo_cv_report(&tables, &mut out)?,
            Analysis::Skewsize => skewsize_report(&tables, &mut out)?,
            Analysis::Shap => shap_report(config, &slices, &by_id, &mut out, &mut notes)?,
            Analysis::EmbedBias => embed_bias_report(config, &slices, &by_id, &mut out, &mut notes)?,
            Analysis::Ablation => ablation_report(&slices, &mut out)?,
            Analysis::Wordcloud => wordcloud_report(&slices, &mut out)?,
        }
    }
    let summary = summary_markdown(config, &store, &variants, &tables, &notes);
    out.bytes("summary.md", summary.as_bytes())?;
    Ok(ReportSummary {
        report_dir: dir,
        files: out.files.into_iter().collect(),
        notes,
    })
}

fn outcomes(records: &[RunRecord]) -> Vec<OutcomeRecord> {
    records.iter().map(|r| r.outcome.clone()).collect()
}

fn metrics_tables(config: &ExperimentConfig, slices: &Slices, notes: &mut Vec<String>) -> Result<Vec<MetricsTable>, ReportError> {
    let mut tables = Vec::new();
    for ((model, kind), records) in slices {
        if !is_graded(*kind) {
            continue;
        }
        let outcomes = outcomes(records);
        for &attr in &config.analysis.attributes {
            match compute_metrics(&outcomes, attr, model, kind.as_str()) {
                Ok(t) => tables.push(t),
                Err(e) => notes.push(format!("metrics {model}/{kind}/{}: {e}", attr.as_str())),
            }
        }
    }
    Ok(tables)
}

// ---------------------------------------------------------------------------
// Accuracy, EO/CV, SkewSize, ablation

fn accuracy_report(
    config: &ExperimentConfig,
    slices: &Slices,
    tables: &[MetricsTable],
    out: &mut Writer,
) -> Result<(), ReportError> {
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, tables)?;
    out.bytes("metrics.csv", &csv)?;
    out.json("metrics.json", &tables)?;

    let models: BTreeSet<&str> = slices.keys().map(|(m, _)| m.as_str()).collect();
    let kinds: BTreeSet<TemplateKind> = slices.keys().map(|(_, k)| *k).filter(|k| is_graded(*k)).collect();
    for &attr in &config.analysis.attributes {
        for &kind in &kinds {
            let groups = attr.groups();
            let mut rows = Vec::new();
            for (a, i) in groups.iter().enumerate() {
                for j in &groups[a + 1..] {
                    let mut row = vec![i.to_string(), j.to_string()];
                    for &m in &models {
                        let cell = slices
                            .get(&(m.to_string(), kind))
                            .map(|r| accuracy_delta(i, j, &outcomes(r)))
                            .and_then(Result::ok)
                            .map(f4)
                            .unwrap_or_default();
                        row.push(cell);
                    }
                    rows.push(row);
                }
            }
            let mut header = vec!["group_i", "group_j"];
            header.extend(models.iter().copied());
            out.csv(&format!("delta_{}_{}.csv", attr.as_str(), kind.as_str()), &header, &rows)?;
        }
    }

    // Relevance ratings and explanation overlap, when those kinds ran.
    let mut relevance = Vec::new();
    let mut overlap = Vec::new();
    for ((model, kind), records) in slices {
        for &attr in &config.analysis.attributes {
            for g in attr.groups() {
                let in_group: Vec<&RunRecord> = records.iter().filter(|r| r.outcome.in_group(&g)).collect();
                let scores: Vec<f64> = in_group.iter().filter_map(|r| r.relevance_score.map(f64::from)).collect();
                if !scores.is_empty() {
                    relevance.push(vec![
                        model.clone(),
                        kind.as_str().into(),
                        attr.as_str().into(),
                        g.to_string(),
                        scores.len().to_string(),
                        f4(scores.iter().sum::<f64>() / scores.len() as f64),
                    ]);
                }
                let overlaps: Vec<f64> = in_group.iter().filter_map(|r| r.word_overlap.map(|x| x as f64)).collect();
                if !overlaps.is_empty() {
                    overlap.push(vec![
                        model.clone(),
                        kind.as_str().into(),
                        attr.as_str().into(),
                        g.to_string(),
                        overlaps.len().to_string(),
                        f4(overlaps.iter().sum::<f64>() / overlaps.len() as f64),
                    ]);
                }
            }
        }
    }
    let header = ["model_id", "prompt_kind", "attribute", "group", "n", "mean"];
    if !relevance.is_empty() {
        out.csv("relevance.csv", &header, &relevance)?;
    }
    if !overlap.is_empty() {
        out.csv("word_overlap.csv", &header, &overlap)?;
    }
    Ok(())
}

fn eo_cv_report(tables: &[MetricsTable], out: &mut Writer) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = tables
        .iter()
        .map(|t| {
            vec![
                t.model_id.clone(),
                t.prompt_kind.clone(),
                t.attribute.as_str().into(),
                f4(t.overall),
                f4(t.eo),
                f4(t.cv),
            ]
        })
        .collect();
    out.csv("eo_cv.csv", &["model_id", "prompt_kind", "attribute", "overall", "eo", "cv"], &rows)
}

fn skewsize_report(tables: &[MetricsTable], out: &mut Writer) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = tables
        .iter()
        .map(|t| {
            vec![
                t.model_id.clone(),
                t.prompt_kind.clone(),
                t.attribute.as_str().into(),
                t.skewsize.map(f4).unwrap_or_default(),
            ]
        })
        .collect();
    out.csv("skewsize.csv", &["model_id", "prompt_kind", "attribute", "skewsize"], &rows)
}

fn ablation_report(slices: &Slices, out: &mut Writer) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = slices
        .iter()
        .filter(|((_, k), _)| is_graded(*k))
        .map(|((model, kind), records)| {
            let correct = records.iter().filter(|r| r.outcome.correct).count();
            vec![
                model.clone(),
                kind.as_str().into(),
                records.len().to_string(),
                f4(100.0 * correct as f64 / records.len() as f64),
            ]
        })
        .collect();
    out.csv("ablation.csv", &["model_id", "prompt_kind", "n", "accuracy"], &rows)
}

// ---------------------------------------------------------------------------
// Word attributions

#[derive(Serialize)]
struct ShapSlice<'a> {
    model_id: &'a str,
    prompt_kind: TemplateKind,
    n_records: usize,
    vocab_size: usize,
    converged: bool,
    top: &'a [FeatureImpact],
}

/// Surrogate-model attributions of case-text words to correctness.
pub fn shap_for(records: &[RunRecord], variants: &HashMap<&str, &CaseVariant>, min_df: usize) -> Result<(Vec<FeatureImpact>, bool, usize), ShapError> {
    let texts: Vec<&str> = records
        .iter()
        .map(|r| variants.get(r.outcome.variant_id.as_str()).map_or("", |v| v.text()))
        .collect();
    let y: Vec<bool> = records.iter().map(|r| r.outcome.correct).collect();
    let vm = build_vocab_matrix(&texts, &y, min_df)?;
    let model = fit_surrogate(&vm);
    Ok((shap_values(&model, &vm)?, model.converged, vm.vocab.len()))
}

fn shap_report(
    config: &ExperimentConfig,
    slices: &Slices,
    variants: &HashMap<&str, &CaseVariant>,
    out: &mut Writer,
    notes: &mut Vec<String>,
) -> Result<(), ReportError> {
    let k = config.analysis.top_k;
    let mut top_rows = Vec::new();
    let mut impacts_all = Vec::new();
    for ((model, kind), records) in slices.iter().filter(|((_, k), _)| is_graded(*k)) {
        match shap_for(records, variants, config.analysis.shap_min_df) {
            Ok((impacts, converged, vocab_size)) => {
                let mut csv = Vec::new();
                write_impacts_csv(&mut csv, &impacts)?;
                out.bytes(&format!("shap_{}_{}.csv", file_stem(model), kind.as_str()), &csv)?;
                for f in impacts.iter().take(k) {
                    top_rows.push(vec![
                        model.clone(),
                        kind.as_str().into(),
                        f.rank.to_string(),
                        f.word.clone(),
                        format!("{:.6}", f.impact),
                    ]);
                }
                impacts_all.push((model.clone(), *kind, records.len(), vocab_size, converged, impacts));
            }
            Err(e) => notes.push(format!("shap {model}/{kind}: {e}")),
        }
    }
    out.csv("shap_top5.csv", &["model_id", "prompt_kind", "rank", "word", "impact"], &top_rows)?;
    let json: Vec<ShapSlice<'_>> = impacts_all
        .iter()
        .map(|(m, kind, n, vocab, conv, imp)| ShapSlice {
            model_id: m,
            prompt_kind: *kind,
            n_records: *n,
            vocab_size: *vocab,
            converged: *conv,
            top: &imp[..imp.len().min(k)],
        })
        .collect();
    out.json("shap.json", &json)
}

// ---------------------------------------------------------------------------
// Embedding bias

fn needs_embedding(config: &ExperimentConfig) -> Result<&crate::orchestrator::config::EmbeddingConfig, ReportError> {
    config.embedding.as_ref().ok_or_else(|| ReportError::MissingAnalysisInput {
        analysis: Analysis::EmbedBias,
        missing: "an [embedding] section".into(),
    })
}

/// Explanations scored per slice: non-empty ones, in variant order.
fn explanations(records: &[RunRecord]) -> Vec<&RunRecord> {
    records.iter().filter(|r| !r.outcome.explanation.trim().is_empty()).collect()
}

fn importance_for(slices: &Slices) -> HashMap<String, f64> {
    let docs: Vec<&str> = slices
        .values()
        .flat_map(|rs| explanations(rs))
        .map(|r| r.outcome.explanation.as_str())
        .collect();
    tfidf_importance(&docs)
}

/// Every text the embedding analysis of a run will need: the sentence pairs
/// with probes, and the windows and words of every explanation. Sorted and
/// deduplicated, for handing to an external embedding job.
pub fn embedding_request_texts(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<String>, ReportError> {
    let emb = needs_embedding(config)?;
    let store = ResultsStore::open(run_dir)?;
    let slices = slices(&store);
    let excluded = config.gender_words()?;
    let pairs = config.sentence_pairs()?;
    let mut texts: BTreeSet<String> = pairs.texts().into_iter().map(String::from).collect();
    for rs in slices.values() {
        for r in explanations(rs) {
            let text = &r.outcome.explanation;
            texts.extend(crate::embedbias::window_texts(text, emb.window_tokens, emb.window_step)?);
            let words: BTreeSet<String> = crate::text::lower_words(text)
                .into_iter()
                .filter(|w| !excluded.contains(w))
                .collect();
            texts.extend(words);
        }
    }
    Ok(texts.into_iter().collect())
}

/// The direction for a config.
pub fn direction_for(config: &ExperimentConfig) -> Result<GenderDirection, ReportError> {
    let emb = needs_embedding(config)?;
    let source = config.embedding_source()?.expect("embedding configured");
    Ok(direction_from_pairs(&config.sentence_pairs()?, &source, emb.orientation)?)
}

fn cell_row(label: &str, cell: &Option<BiasCell>) -> Vec<String> {
    let mut row = vec![label.to_string()];
    match cell {
        Some(c) => row.extend([
            c.n.to_string(),
            f4(c.mean_gender_bias),
            f4(c.mean_male_bias_score),
            f4(c.mean_female_bias_score),
            f4(c.median_bias_score),
        ]),
        None => row.extend(["0".into(), String::new(), String::new(), String::new(), String::new()]),
    }
    row
}

fn bias_table_rows(table: &BiasTable) -> Vec<Vec<String>> {
    table.rows.iter().map(|(l, c)| cell_row(l, c)).collect()
}

fn heatmap_rows(h: &BiasHeatmap) -> Vec<Vec<String>> {
    h.rows
        .iter()
        .map(|r| {
            let mut row = vec![r.speciality.to_string(), r.n.to_string()];
            row.extend(r.cells.iter().map(|c| c.as_ref().map(|c| f4(c.median_bias_score)).unwrap_or_default()));
            row
        })
        .collect()
}

fn embed_bias_report(
    config: &ExperimentConfig,
    slices: &Slices,
    variants: &HashMap<&str, &CaseVariant>,
    out: &mut Writer,
    notes: &mut Vec<String>,
) -> Result<(), ReportError> {
    let emb = needs_embedding(config)?;
    let source = config.embedding_source()?.expect("embedding configured");
    let direction = direction_from_pairs(&config.sentence_pairs()?, &source, emb.orientation)?;
    out.json("direction.json", &direction)?;
    let importance = importance_for(slices);
    let excluded = config.gender_words()?;
    let scorer = BiasScorer {
        direction: &direction,
        importance: &importance,
        excluded: &excluded,
        source: &source,
        window_tokens: emb.window_tokens,
        window_step: emb.window_step,
    };
    let mut corpus_rows = Vec::new();
    for ((model, kind), records) in slices {
        let scored_records = explanations(records);
        if scored_records.is_empty() {
            continue;
        }
        let texts: Vec<&str> = scored_records.iter().map(|r| r.outcome.explanation.as_str()).collect();
        let results = scorer.score_all(&texts, ExecMode::default());
        let mut cases = Vec::new();
        for (r, res) in scored_records.iter().zip(results) {
            let o = &r.outcome;
            let Some(v) = variants.get(o.variant_id.as_str()) else {
                notes.push(format!("embed_bias {model}/{kind}: unknown variant {}", o.variant_id));
                continue;
            };
            cases.push(ScoredCase {
                variant_id: o.variant_id.clone(),
                base_id: o.base_id.clone(),
                gender: o.gender,
                ethnicity: o.ethnicity,
                speciality: v.case.speciality,
                result: res?,
            });
        }
        let stem = format!("{}_{}", file_stem(model), kind.as_str());
        let mut jsonl = Vec::new();
        for c in &cases {
            serde_json::to_writer(&mut jsonl, c)?;
            jsonl.push(b'\n');
        }
        out.bytes(&format!("bias_scores_{stem}.jsonl"), &jsonl)?;
        let header = ["cell", "n", "gender_bias", "male_bias_score", "female_bias_score", "median_bias_score"];
        for (dim, name) in [
            (AggregateBy::Gender, "gender"),
            (AggregateBy::Ethnicity, "ethnicity"),
            (AggregateBy::GenderXEthnicity, "gender_x_ethnicity"),
            (AggregateBy::Speciality, "speciality"),
        ] {
            let table = aggregate_bias(&cases, dim);
            out.csv(&format!("bias_{stem}_{name}.csv"), &header, &bias_table_rows(&table))?;
        }
        let heat = bias_heatmap(&cases, AggregateBy::Gender);
        let mut header = vec!["speciality".to_string(), "n".to_string()];
        header.extend(heat.columns.iter().cloned());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        out.csv(&format!("heatmap_{stem}.csv"), &header, &heatmap_rows(&heat))?;
        let results: Vec<_> = cases.iter().map(|c| c.result.clone()).collect();
        corpus_rows.push(vec![
            model.clone(),
            kind.as_str().into(),
            cases.len().to_string(),
            median_bias_score(&results).map(f4).unwrap_or_default(),
        ]);
    }
    out.csv("median_bias.csv", &["model_id", "prompt_kind", "n", "median_bias_score"], &corpus_rows)
}

// ---------------------------------------------------------------------------
// Group-specific vocabulary

/// Content words appearing in one group's explanations and in no other
/// group's, with the number of explanations using them.
pub fn unique_words(records: &[RunRecord], attribute: BiasAttribute) -> BTreeMap<GroupKey, Vec<(String, usize)>> {
    let mut counts: BTreeMap<GroupKey, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        let g = attribute.key_of(r.outcome.gender, r.outcome.ethnicity);
        let entry = counts.entry(g).or_default();
        for w in content_words(&r.outcome.explanation) {
            *entry.entry(w).or_default() += 1;
        }
    }
    let mut owners: HashMap<&str, usize> = HashMap::new();
    for words in counts.values() {
        for w in words.keys() {
            *owners.entry(w.as_str()).or_default() += 1;
        }
    }
    counts
        .iter()
        .map(|(g, words)| {
            let mut unique: Vec<(String, usize)> = words
                .iter()
                .filter(|(w, _)| owners[w.as_str()] == 1)
                .map(|(w, c)| (w.clone(), *c))
                .collect();
            unique.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            (*g, unique)
        })
        .collect()
}

fn wordcloud_report(slices: &Slices, out: &mut Writer) -> Result<(), ReportError> {
    let mut rows = Vec::new();
    for ((model, kind), records) in slices {
        for attr in [BiasAttribute::Gender, BiasAttribute::Ethnicity] {
            for (g, words) in unique_words(records, attr) {
                for (w, c) in words {
                    rows.push(vec![
                        model.clone(),
                        kind.as_str().into(),
                        attr.as_str().into(),
                        g.to_string(),
                        w,
                        c.to_string(),
                    ]);
                }
            }
        }
    }
    out.csv("wordcloud.csv", &["model_id", "prompt_kind", "attribute", "group", "word", "count"], &rows)
}

// ---------------------------------------------------------------------------
// Summary

fn summary_markdown(
    config: &ExperimentConfig,
    store: &ResultsStore,
    variants: &[CaseVariant],
    tables: &[MetricsTable],
    notes: &[String],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", config.name);
    let bases: BTreeSet<&str> = variants.iter().map(|v| v.base_id.as_str()).collect();
    let _ = writeln!(s, "- base cases: {}", bases.len());
    let _ = writeln!(s, "- variants: {}", variants.len());
    let _ = writeln!(s, "- stored responses: {}", store.len());
    let models: Vec<&str> = config.models.iter().map(|m| m.model_id.as_str()).collect();
    let _ = writeln!(s, "- models: {}", models.join(", "));
    let _ = writeln!(s, "- seed: {}\n", config.seed);
    if !tables.is_empty() {
        let _ = writeln!(s, "## Accuracy\n");
        let _ = writeln!(s, "| model | prompt | attribute | overall | EO | CV | SkewSize |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for t in tables {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {} |",
                t.model_id,
                t.prompt_kind,
                t.attribute.as_str(),
                t.overall,
                t.eo,
                t.cv,
                t.skewsize.map(f4).unwrap_or_else(|| "n/a".into())
            );
        }
        let _ = writeln!(s);
    }
    if !notes.is_empty() {
        let _ = writeln!(s, "## Notes\n");
        for n in notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

//! Corpus filtering, counterfactual patient variations (CPVs) and year
//! splits.
//!
//! A CPV rewrites a case so that only the patient's gender and/or ethnicity
//! changes. Gender rewriting is token based: every lexicon hit is replaced by
//! the target form of its slot, keeping capitalisation, and everything else
//! is copied byte for byte. Ethnicity is injected as an adjective in front of
//! the patient noun of the introduction sentence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, CaseRecord, ClinicalCase, CorpusError, Speciality};
use crate::demographics::{optional_ethnicity_str, parse_optional_ethnicity, Ethnicity, Gender};
use crate::exec::{map_collect, ExecMode};
use crate::extraction::{CaseFeatures, EthnicityMention, Rules, SwapRow, TermRole};
use crate::text::{first_sentence_end, is_stopword, match_case, split_contraction, word_spans, WordSpan};

/// Last publication year of the training split.
pub const TRAIN_UNTIL: i32 = 2020;
/// Last publication year of the validation split; later cases are test.
pub const VAL_UNTIL: i32 = 2022;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CpvError {
    #[error("gendered term `{term}` has no rewrite mapping")]
    Unswappable { term: String },
    #[error("no patient noun in the introduction sentence")]
    NoAnchor,
    #[error("text already states an ethnicity ({mention:?})")]
    ExistingEthnicity { mention: EthnicityMention },
    #[error("rewritten text reads as {found}, expected {expected}")]
    GenderMismatch { expected: Gender, found: Gender },
    #[error("{cases} cases but {features} feature rows")]
    FeatureCount { cases: usize, features: usize },
    #[error("invalid year range: {0}")]
    YearRange(String),
    #[error("cases without a date: {}", base_ids.join(", "))]
    MissingDate { base_ids: Vec<String> },
}

// ---------------------------------------------------------------------------
// Filtering

/// Publication-year window `after < year ≤ until`; either bound may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YearRange {
    #[serde(default)]
    pub after: Option<i32>,
    #[serde(default)]
    pub until: Option<i32>,
}

impl YearRange {
    pub fn validate(&self) -> Result<(), CpvError> {
        match (self.after, self.until) {
            (Some(a), Some(u)) if a >= u => Err(CpvError::YearRange(format!(
                "lower bound {a} must be below upper bound {u}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, year: i32) -> bool {
        self.after.is_none_or(|a| year > a) && self.until.is_none_or(|u| year <= u)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Drop cases with sex-specific conditions (pregnancy, prostate, ...).
    pub exclude_gender_specific: bool,
    /// Drop cases that already state the patient's ethnicity.
    pub exclude_explicit_ethnicity: bool,
    /// Drop cases that refer to figures or images.
    pub exclude_nontextual: bool,
    /// Keep only these specialities; empty keeps all.
    pub specialities: Vec<Speciality>,
    pub year_range: Option<YearRange>,
}

/// Keeps the cases that pass every enabled criterion, in input order.
/// `features[i]` must describe `cases[i]`. Undated cases fail any year window.
pub fn filter_corpus(
    cases: &[ClinicalCase],
    features: &[CaseFeatures],
    config: &FilterConfig,
) -> Result<Vec<ClinicalCase>, CpvError> {
    if cases.len() != features.len() {
        return Err(CpvError::FeatureCount {
            cases: cases.len(),
            features: features.len(),
        });
    }
    if let Some(r) = &config.year_range {
        r.validate()?;
    }
    let specialities: BTreeSet<Speciality> = config.specialities.iter().copied().collect();
    Ok(cases
        .iter()
        .zip(features)
        .filter(|(case, f)| {
            !(config.exclude_gender_specific && f.gender_specific_condition)
                && !(config.exclude_explicit_ethnicity && f.ethnicity_mention.is_some())
                && !(config.exclude_nontextual && f.has_nontextual_refs)
                && (specialities.is_empty() || specialities.contains(&case.speciality))
                && config
                    .year_range
                    .is_none_or(|r| case.year().is_some_and(|y| r.contains(y)))
        })
        .map(|(case, _)| case.clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Gender rewriting

#[derive(Debug, Clone, PartialEq)]
enum Edit {
    Keep,
    Replace(String),
    /// Remove the word and the whitespace after it.
    Delete,
}

/// Words after an object pronoun that do not start a noun phrase.
const NON_NOUN_FOLLOWERS: &[&str] = &["home", "back", "today", "yesterday", "immediately", "again", "later"];

struct Tokens<'a> {
    text: &'a str,
    spans: Vec<WordSpan>,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Tokens {
            text,
            spans: word_spans(text),
        }
    }

    fn len(&self) -> usize {
        self.spans.len()
    }

    fn word(&self, i: usize) -> &'a str {
        self.spans[i].slice(self.text)
    }

    fn base_lower(&self, i: usize) -> String {
        split_contraction(self.word(i)).0.to_lowercase()
    }

    /// Text between word `i` and word `i + 1` (or the end of the text).
    fn gap_after(&self, i: usize) -> &'a str {
        let end = self.spans.get(i + 1).map_or(self.text.len(), |s| s.start);
        &self.text[self.spans[i].end..end]
    }

    /// The next word, if only whitespace separates it from word `i`.
    fn adjacent_next(&self, i: usize) -> Option<usize> {
        (i + 1 < self.len() && self.gap_after(i).trim().is_empty()).then_some(i + 1)
    }

    /// Whether word `i` is followed by something it can modify, telling
    /// "her face" (possessive) from "gave her a" (object).
    fn starts_noun_phrase_after(&self, i: usize) -> bool {
        if i + 1 >= self.len() {
            return false;
        }
        let gap = self.gap_after(i);
        if !gap.trim().is_empty() {
            // "her 2 children"
            return gap.chars().all(|c| c.is_whitespace() || c.is_ascii_digit())
                && gap.chars().any(|c| c.is_ascii_digit());
        }
        let next = self.base_lower(i + 1);
        next == "own" || !(is_stopword(&next) || NON_NOUN_FOLLOWERS.contains(&next.as_str()))
    }
}

impl Rules {
    fn rows_with_form(&self, lower: &str, g: Gender) -> Vec<&SwapRow> {
        self.swap_rows
            .iter()
            .filter(|r| r.form(g).eq_ignore_ascii_case(lower))
            .collect()
    }

    fn pick_row<'r>(&self, rows: &[&'r SwapRow], toks: &Tokens<'_>, i: usize) -> &'r SwapRow {
        let has = |role: TermRole| rows.iter().find(|r| r.role == role).copied();
        let before_noun = toks.starts_noun_phrase_after(i);
        if let (Some(obj), Some(poss)) = (has(TermRole::Object), has(TermRole::Possessive)) {
            return if before_noun { poss } else { obj };
        }
        if let (Some(poss), Some(pron)) = (has(TermRole::Possessive), has(TermRole::PossessivePronoun)) {
            return if before_noun { poss } else { pron };
        }
        rows[0]
    }

    /// Rewrites the verb governed by the subject at `i` using `table`.
    fn agree_verb(&self, toks: &Tokens<'_>, i: usize, table: &std::collections::HashMap<String, String>, edits: &mut [Edit]) {
        let mut j = i;
        while let Some(n) = toks.adjacent_next(j) {
            let lower = toks.word(n).to_lowercase();
            if self.adverbs.contains(&lower) {
                j = n;
                continue;
            }
            if let Some(v) = table.get(&lower) {
                edits[n] = Edit::Replace(match_case(toks.word(n), v));
            }
            return;
        }
    }

    /// Replaces every gendered patient reference with its `target` form.
    pub fn swap_gender(&self, text: &str, target: Gender) -> Result<String, CpvError> {
        let toks = Tokens::new(text);
        let n = toks.len();
        let lowers: Vec<String> = (0..n).map(|i| toks.base_lower(i)).collect();
        let fully_neutral = lowers.iter().all(|w| self.gender_of_term(w).is_none());
        let mut edits = vec![Edit::Keep; n];

        for i in 0..n {
            let (base, suffix) = split_contraction(toks.word(i));
            let lower = &lowers[i];
            if let Some(source) = self.gender_of_term(lower) {
                let rows = self.rows_with_form(lower, source);
                if rows.is_empty() {
                    return Err(CpvError::Unswappable {
                        term: base.to_string(),
                    });
                }
                let row = self.pick_row(&rows, &toks, i);
                let adjectival = row.role == TermRole::Noun
                    && suffix.is_empty()
                    && toks
                        .adjacent_next(i)
                        .is_some_and(|j| self.anchor_nouns.contains(&lowers[j]));
                if adjectival && target == Gender::Neutral {
                    edits[i] = Edit::Delete;
                    continue;
                }
                let mut suffix = suffix.to_string();
                if row.role == TermRole::Subject && target == Gender::Neutral {
                    if suffix.is_empty() {
                        self.agree_verb(&toks, i, &self.verb_singular_to_plural, &mut edits);
                    } else if let Some(s) = self.verb_singular_to_plural.get(&suffix) {
                        suffix = s.clone();
                    }
                }
                if edits[i] == Edit::Keep {
                    edits[i] = Edit::Replace(format!("{}{}", match_case(base, row.form(target)), suffix));
                }
            } else if target != Gender::Neutral && fully_neutral {
                // Singular "they" and "Mx" only exist in a fully neutral text.
                let Some(row) = self.swap_rows.iter().find(|r| {
                    r.neutral.eq_ignore_ascii_case(lower)
                        && !matches!(r.role, TermRole::Noun | TermRole::ChildNoun)
                }) else {
                    continue;
                };
                let mut suffix = suffix.to_string();
                if row.role == TermRole::Subject {
                    if suffix.is_empty() {
                        self.agree_verb(&toks, i, &self.verb_plural_to_singular, &mut edits);
                    } else if suffix == "'ve" {
                        suffix = "'s".to_string();
                    } else if let Some(s) = self.verb_plural_to_singular.get(&suffix) {
                        suffix = s.clone();
                    }
                }
                edits[i] = Edit::Replace(format!("{}{}", match_case(base, row.form(target)), suffix));
            }
        }

        let rewritten = apply_edits(&toks, &edits);
        let rewritten = match target {
            Gender::Neutral => rewritten,
            _ if self.detect_gender(&rewritten) == target => rewritten,
            _ => self.gender_intro_noun(&rewritten, target)?,
        };
        let found = self.detect_gender(&rewritten);
        if found != target {
            return Err(CpvError::GenderMismatch {
                expected: target,
                found,
            });
        }
        Ok(rewritten)
    }

    /// Turns the neutral patient noun of the introduction into a gendered
    /// one ("patient" → "man", "child" → "girl", "infant" → "male infant").
    fn gender_intro_noun(&self, text: &str, target: Gender) -> Result<String, CpvError> {
        let intro_end = first_sentence_end(text);
        let toks = Tokens::new(text);
        let anchor = (0..toks.len())
            .take_while(|&i| toks.spans[i].end <= intro_end)
            .find(|&i| self.anchor_nouns.contains(&toks.base_lower(i)))
            .ok_or(CpvError::NoAnchor)?;
        let minor = self.extract_age(text).is_some_and(|a| a.years < 18.0);
        let row_of = |role: TermRole| self.swap_rows.iter().find(|r| r.role == role);
        let (base, suffix) = split_contraction(toks.word(anchor));
        let replacement = match base.to_lowercase().as_str() {
            "patient" | "person" | "individual" | "adult" if !minor => row_of(TermRole::Noun),
            "patient" | "person" | "individual" | "child" => row_of(TermRole::ChildNoun),
            _ => None,
        };
        let span = toks.spans[anchor];
        let new_word = match replacement {
            Some(row) => format!("{}{}", match_case(base, row.form(target)), suffix),
            None => {
                // "infant" → "male infant"
                let adj = self
                    .swap_rows
                    .iter()
                    .find(|r| r.role == TermRole::Noun && r.male.eq_ignore_ascii_case("male"))
                    .ok_or(CpvError::NoAnchor)?;
                let adj = match_case(base, adj.form(target));
                format!("{adj} {}", base.to_lowercase()) + suffix
            }
        };
        Ok(format!("{}{}{}", &text[..span.start], new_word, &text[span.end..]))
    }

    /// Inserts the ethnicity adjective before the introduction's patient
    /// noun. `None` leaves the text unchanged.
    pub fn inject_ethnicity(&self, text: &str, ethnicity: Option<Ethnicity>) -> Result<String, CpvError> {
        let Some(ethnicity) = ethnicity else {
            return Ok(text.to_string());
        };
        if let Some(mention) = self.detect_ethnicity(text) {
            return Err(CpvError::ExistingEthnicity { mention });
        }
        let intro_end = first_sentence_end(text);
        let toks = Tokens::new(text);
        let anchor = (0..toks.len())
            .take_while(|&i| toks.spans[i].end <= intro_end)
            .find(|&i| self.anchor_nouns.contains(&toks.base_lower(i)))
            .ok_or(CpvError::NoAnchor)?;
        let adjective = &self.adjectives[&ethnicity];
        let insert_at = toks.spans[anchor].start;
        let mut out = String::with_capacity(text.len() + adjective.len() + 2);
        out.push_str(&text[..insert_at]);
        // Keep the indefinite article in agreement with the new first word.
        if anchor > 0 && toks.gap_after(anchor - 1).trim().is_empty() {
            let prev = toks.spans[anchor - 1];
            let article = prev.slice(text);
            let vowel = adjective.starts_with(['A', 'E', 'I', 'O', 'U', 'a', 'e', 'i', 'o', 'u']);
            let fixed = match (article.to_lowercase().as_str(), vowel) {
                ("a", true) => Some(match_case(article, "an")),
                ("an", false) => Some(match_case(article, "a")),
                _ => None,
            };
            if let Some(fixed) = fixed {
                out.truncate(prev.start);
                out.push_str(&fixed);
                out.push_str(&text[prev.end..insert_at]);
            }
        }
        out.push_str(adjective);
        out.push(' ');
        out.push_str(&text[insert_at..]);
        Ok(out)
    }
}

fn apply_edits(toks: &Tokens<'_>, edits: &[Edit]) -> String {
    let text = toks.text;
    let mut out = String::with_capacity(text.len() + 16);
    let mut cursor = 0;
    for (i, edit) in edits.iter().enumerate() {
        let span = toks.spans[i];
        match edit {
            Edit::Keep => {}
            Edit::Replace(w) => {
                out.push_str(&text[cursor..span.start]);
                out.push_str(w);
                cursor = span.end;
            }
            Edit::Delete => {
                out.push_str(&text[cursor..span.start]);
                let gap = toks.gap_after(i);
                cursor = span.end + gap.len() - gap.trim_start().len();
            }
        }
    }
    out.push_str(&text[cursor..]);
    out
}

/// [`Rules::swap_gender`] with the shipped rules.
pub fn swap_gender(text: &str, target: Gender) -> Result<String, CpvError> {
    Rules::builtin().swap_gender(text, target)
}

/// [`Rules::inject_ethnicity`] with the shipped rules.
pub fn inject_ethnicity(text: &str, ethnicity: Option<Ethnicity>) -> Result<String, CpvError> {
    Rules::builtin().inject_ethnicity(text, ethnicity)
}

// ---------------------------------------------------------------------------
// Variants

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub gender: Gender,
    pub ethnicity: Option<Ethnicity>,
}

impl VariantSpec {
    pub fn new(gender: Gender, ethnicity: Option<Ethnicity>) -> Self {
        VariantSpec { gender, ethnicity }
    }

    pub fn variant_id(&self, base_id: &str) -> String {
        format!(
            "{base_id}::{}-{}",
            self.gender.as_str().to_lowercase(),
            optional_ethnicity_str(self.ethnicity).to_lowercase()
        )
    }
}

/// One rewrite of a case. `case.id` is the base id; `case.case_text` is the
/// rewritten text; question, options and gold are inherited unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseVariant {
    pub base_id: String,
    pub variant_id: String,
    pub spec: VariantSpec,
    pub is_original: bool,
    pub case: ClinicalCase,
}

impl CaseVariant {
    pub fn text(&self) -> &str {
        &self.case.case_text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpvFailure {
    pub base_id: String,
    pub spec: Option<VariantSpec>,
    pub error: CpvError,
}

#[derive(Debug, Clone, Default)]
pub struct CpvOutput {
    pub variants: Vec<CaseVariant>,
    /// Cases dropped entirely because one of their rewrites failed.
    pub failures: Vec<CpvFailure>,
}

/// Builds CPVs with the shipped rules on all cores.
pub fn build_cpv(cases: &[ClinicalCase], genders: &[Gender], ethnicities: &[Option<Ethnicity>]) -> CpvOutput {
    build_cpv_with(Rules::builtin(), ExecMode::default(), cases, genders, ethnicities)
}

/// Emits each case's original plus one rewrite per (gender × ethnicity)
/// combination other than the original's own attributes. A case whose
/// rewrite fails is reported and contributes no variants, so every group
/// covers the same base cases. Output is ordered by (base id, gender,
/// ethnicity) regardless of `mode`.
pub fn build_cpv_with(
    rules: &Rules,
    mode: ExecMode,
    cases: &[ClinicalCase],
    genders: &[Gender],
    ethnicities: &[Option<Ethnicity>],
) -> CpvOutput {
    let genders: BTreeSet<Gender> = genders.iter().copied().collect();
    let ethnicities: BTreeSet<Option<Ethnicity>> = ethnicities.iter().copied().collect();
    let per_case = map_collect(mode, cases, |case| variants_of(rules, case, &genders, &ethnicities));
    let mut out = CpvOutput::default();
    for r in per_case {
        match r {
            Ok(vs) => out.variants.extend(vs),
            Err(f) => out.failures.push(f),
        }
    }
    out.variants
        .sort_by(|a, b| (&a.base_id, a.spec).cmp(&(&b.base_id, b.spec)));
    out.failures.sort_by(|a, b| a.base_id.cmp(&b.base_id));
    out
}

fn variants_of(
    rules: &Rules,
    case: &ClinicalCase,
    genders: &BTreeSet<Gender>,
    ethnicities: &BTreeSet<Option<Ethnicity>>,
) -> Result<Vec<CaseVariant>, CpvFailure> {
    let mention = rules.detect_ethnicity(&case.case_text);
    let original = VariantSpec::new(
        rules.detect_gender(&case.case_text),
        mention.and_then(EthnicityMention::as_ethnicity),
    );
    let make = |spec: VariantSpec, text: String, is_original: bool| CaseVariant {
        base_id: case.id.clone(),
        variant_id: spec.variant_id(&case.id),
        spec,
        is_original,
        case: ClinicalCase {
            case_text: text,
            ..case.clone()
        },
    };
    let mut out = vec![make(original, case.case_text.clone(), true)];
    for &gender in genders {
        for &ethnicity in ethnicities {
            let spec = VariantSpec::new(gender, ethnicity);
            if spec == original {
                continue;
            }
            let fail = |error| CpvFailure {
                base_id: case.id.clone(),
                spec: Some(spec),
                error,
            };
            // A stated ethnicity cannot be removed or replaced.
            if let Some(m) = mention.filter(|_| ethnicity != original.ethnicity) {
                return Err(fail(CpvError::ExistingEthnicity { mention: m }));
            }
            let text = rules.swap_gender(&case.case_text, gender).map_err(fail)?;
            let text = if ethnicity == original.ethnicity {
                text
            } else {
                rules.inject_ethnicity(&text, ethnicity).map_err(fail)?
            };
            out.push(make(spec, text, false));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Year splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn of_year(year: i32) -> Split {
        if year <= TRAIN_UNTIL {
            Split::Train
        } else if year <= VAL_UNTIL {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CaseVariant>,
    pub val: Vec<CaseVariant>,
    pub test: Vec<CaseVariant>,
}

/// Assigns variants to splits by their base case's publication year.
pub fn split_by_year(variants: Vec<CaseVariant>) -> Result<Splits, CpvError> {
    let missing: BTreeSet<String> = variants
        .iter()
        .filter(|v| v.case.date.is_none())
        .map(|v| v.base_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CpvError::MissingDate {
            base_ids: missing.into_iter().collect(),
        });
    }
    let mut splits = Splits::default();
    for v in variants {
        let bucket = match Split::of_year(v.case.year().expect("checked above")) {
            Split::Train => &mut splits.train,
            Split::Val => &mut splits.val,
            Split::Test => &mut splits.test,
        };
        bucket.push(v);
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Variants JSONL

/// On-disk variant: the corpus record (with `id` = variant id) plus the
/// variant fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRecord {
    #[serde(flatten)]
    pub record: CaseRecord,
    pub base_id: String,
    pub variant_gender: Gender,
    pub variant_ethnicity: String,
    pub is_original: bool,
}

impl From<&CaseVariant> for VariantRecord {
    fn from(v: &CaseVariant) -> Self {
        let mut record = CaseRecord::from(&v.case);
        record.id = v.variant_id.clone();
        VariantRecord {
            record,
            base_id: v.base_id.clone(),
            variant_gender: v.spec.gender,
            variant_ethnicity: optional_ethnicity_str(v.spec.ethnicity).to_string(),
            is_original: v.is_original,
        }
    }
}

impl VariantRecord {
    pub fn into_variant(self, record_index: usize) -> Result<CaseVariant, CorpusError> {
        let ethnicity = parse_optional_ethnicity(&self.variant_ethnicity)
            .map_err(|reason| CorpusError::Schema { record_index, reason })?;
        let variant_id = self.record.id.clone();
        let mut case = self.record.into_case(record_index)?;
        case.id = self.base_id.clone();
        Ok(CaseVariant {
            base_id: self.base_id,
            variant_id,
            spec: VariantSpec::new(self.variant_gender, ethnicity),
            is_original: self.is_original,
            case,
        })
    }
}

pub fn write_variants_jsonl<W: Write>(mut w: W, variants: &[CaseVariant]) -> std::io::Result<()> {
    for v in variants {
        serde_json::to_writer(&mut w, &VariantRecord::from(v))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_variants(path: &Path, variants: &[CaseVariant]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_variants_jsonl(&mut w, variants).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_variants(path: &Path) -> Result<Vec<CaseVariant>, CorpusError> {
    read_jsonl::<VariantRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_variant(i))
        .collect()
}

/// Variant counts per spec, for reporting.
pub fn count_by_spec(variants: &[CaseVariant]) -> BTreeMap<VariantSpec, usize> {
    let mut counts = BTreeMap::new();
    for v in variants {
        *counts.entry(v.spec).or_insert(0) += 1;
    }
    counts
}

//! Rule-based feature extraction from case text.
//!
//! All lexicons and patterns come from a TOML rule file (see
//! `data/rules.toml` for the shipped defaults and the documented key set:
//! `gender_lexicon`, `exclusion_lexicon`, `ethnicity_lexicon`, `age_rules`,
//! `question_patterns`, plus the optional `nontextual` block).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClinicalCase;
use crate::demographics::{Ethnicity, Gender};
use crate::exec::derive_seed;
use crate::text::{first_sentence_end, split_contraction, word_spans};

pub const DEFAULT_RULES_TOML: &str = include_str!("../data/rules.toml");

static DEFAULT_RULES: LazyLock<Rules> =
    LazyLock::new(|| Rules::from_toml_str(DEFAULT_RULES_TOML).expect("shipped rules are valid"));

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rule file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid pattern `{pattern}`: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("invalid rule: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Rule file schema

#[derive(Debug, Clone, Deserialize)]
pub struct RulesConfig {
    pub version: String,
    pub gender_lexicon: GenderLexiconConfig,
    pub exclusion_lexicon: ExclusionConfig,
    pub ethnicity_lexicon: EthnicityLexiconConfig,
    pub age_rules: AgeRulesConfig,
    pub question_patterns: QuestionPatternsConfig,
    #[serde(default)]
    pub nontextual: NontextualConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermRole {
    Noun,
    ChildNoun,
    Subject,
    Object,
    Possessive,
    PossessivePronoun,
    Reflexive,
    Honorific,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SwapRow {
    pub male: String,
    pub female: String,
    pub neutral: String,
    pub role: TermRole,
}

impl SwapRow {
    pub fn form(&self, g: Gender) -> &str {
        match g {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
            Gender::Neutral => &self.neutral,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct GenderLexiconConfig {
    pub terms: Vec<SwapRow>,
    #[serde(default)]
    pub extra_male: Vec<String>,
    #[serde(default)]
    pub extra_female: Vec<String>,
    #[serde(default)]
    pub verb_agreement: BTreeMap<String, String>,
    #[serde(default)]
    pub adverbs: AdverbConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct AdverbConfig {
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExclusionConfig {
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EthnicityLexiconConfig {
    pub anchor_nouns: Vec<String>,
    pub terms: BTreeMap<String, Vec<String>>,
    pub adjectives: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AgeRulesConfig {
    pub decade_offsets: DecadeOffsets,
    pub rules: Vec<AgeRuleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DecadeOffsets {
    pub none: f64,
    pub early: f64,
    pub mid: f64,
    pub late: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeRuleKind {
    Years,
    Unit,
    Range,
    Decade,
    Fixed,
    Gestation,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AgeRuleConfig {
    pub category: String,
    pub kind: AgeRuleKind,
    pub pattern: String,
    #[serde(default)]
    pub age: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct QuestionPatternsConfig {
    pub interpretation: Vec<String>,
    pub next_step: Vec<String>,
    pub diagnosis: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct NontextualConfig {
    pub patterns: Vec<String>,
}

// ---------------------------------------------------------------------------
// Extracted features

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Infant,
    Child,
    Teen,
    Adult,
    Senior,
    Unknown,
}

impl AgeGroup {
    pub fn of_years(years: f64) -> AgeGroup {
        if years < 1.0 {
            AgeGroup::Infant
        } else if years < 13.0 {
            AgeGroup::Child
        } else if years < 18.0 {
            AgeGroup::Teen
        } else if years < 65.0 {
            AgeGroup::Adult
        } else {
            AgeGroup::Senior
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeEstimate {
    pub years: f64,
    pub group: AgeGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EthnicityMention {
    Arab,
    Asian,
    Black,
    Hispanic,
    White,
    Other,
}

impl EthnicityMention {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "Arab" => EthnicityMention::Arab,
            "Asian" => EthnicityMention::Asian,
            "Black" => EthnicityMention::Black,
            "Hispanic" => EthnicityMention::Hispanic,
            "White" => EthnicityMention::White,
            "Other" => EthnicityMention::Other,
            _ => return None,
        })
    }

    pub fn as_ethnicity(self) -> Option<Ethnicity> {
        match self {
            EthnicityMention::Arab => Some(Ethnicity::Arab),
            EthnicityMention::Asian => Some(Ethnicity::Asian),
            EthnicityMention::Black => Some(Ethnicity::Black),
            EthnicityMention::Hispanic => Some(Ethnicity::Hispanic),
            EthnicityMention::White => Some(Ethnicity::White),
            EthnicityMention::Other => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    Diagnosis,
    NextStep,
    Interpretation,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFeatures {
    pub case_id: String,
    pub age_years: Option<f64>,
    pub age_group: AgeGroup,
    pub gender: Gender,
    pub gender_ambiguous: bool,
    pub gender_specific_condition: bool,
    pub ethnicity_mention: Option<EthnicityMention>,
    pub normalized_question: QuestionKind,
    pub has_nontextual_refs: bool,
}

/// Non-fatal: the introduction sentence names both genders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmbiguityWarning {
    pub chosen: Gender,
    pub conflicting_term: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderDetection {
    pub gender: Gender,
    pub warning: Option<AmbiguityWarning>,
}

// ---------------------------------------------------------------------------
// Compiled rules

#[derive(Debug)]
struct AgeRule {
    kind: AgeRuleKind,
    regex: Regex,
    age: Option<f64>,
}

#[derive(Debug)]
pub struct Rules {
    pub version: String,
    pub(crate) swap_rows: Vec<SwapRow>,
    gender_terms: HashMap<String, Gender>,
    pub(crate) verb_singular_to_plural: HashMap<String, String>,
    pub(crate) verb_plural_to_singular: HashMap<String, String>,
    pub(crate) adverbs: HashSet<String>,
    exclusion: Option<Regex>,
    ethnicity_patterns: Vec<(EthnicityMention, Regex)>,
    pub(crate) anchor_nouns: HashSet<String>,
    pub(crate) adjectives: HashMap<Ethnicity, String>,
    age_categories: Vec<Vec<AgeRule>>,
    decade_offsets: DecadeOffsets,
    questions: Vec<(QuestionKind, Vec<Regex>)>,
    nontextual: Vec<Regex>,
}

fn compile(pattern: &str) -> Result<Regex, RulesError> {
    Regex::new(pattern).map_err(|source| RulesError::Pattern {
        pattern: pattern.to_string(),
        source,
    })
}

/// Case-insensitive whole-word alternation over literal phrases, longest
/// first so multi-word terms win over their prefixes.
fn phrase_alternation(terms: &[String]) -> String {
    let mut sorted: Vec<&String> = terms.iter().collect();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    sorted
        .iter()
        .map(|t| {
            t.split_whitespace()
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"\s+")
        })
        .collect::<Vec<_>>()
        .join("|")
}

impl Rules {
    /// The shipped rule set.
    pub fn builtin() -> &'static Rules {
        &DEFAULT_RULES
    }

    pub fn load(path: &Path) -> Result<Rules, RulesError> {
        let text = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Rules::from_toml_str(&text)
    }

    pub fn from_toml_str(s: &str) -> Result<Rules, RulesError> {
        let cfg: RulesConfig = toml::from_str(s)?;
        Rules::from_config(cfg)
    }

    pub fn from_config(cfg: RulesConfig) -> Result<Rules, RulesError> {
        let mut gender_terms = HashMap::new();
        for row in &cfg.gender_lexicon.terms {
            gender_terms.insert(row.male.to_lowercase(), Gender::Male);
            gender_terms.insert(row.female.to_lowercase(), Gender::Female);
        }
        for t in &cfg.gender_lexicon.extra_male {
            gender_terms.insert(t.to_lowercase(), Gender::Male);
        }
        for t in &cfg.gender_lexicon.extra_female {
            gender_terms.insert(t.to_lowercase(), Gender::Female);
        }
        if let Some(t) = cfg
            .gender_lexicon
            .terms
            .iter()
            .find(|r| r.male.eq_ignore_ascii_case(&r.female))
        {
            return Err(RulesError::Invalid(format!(
                "gender row `{}` has identical male and female forms",
                t.male
            )));
        }

        let verb_singular_to_plural: HashMap<String, String> = cfg
            .gender_lexicon
            .verb_agreement
            .iter()
            .map(|(k, v)| (k.to_lowercase(), v.to_lowercase()))
            .collect();
        let verb_plural_to_singular = verb_singular_to_plural
            .iter()
            .filter(|(k, v)| k != v)
            .map(|(k, v)| (v.clone(), k.clone()))
            .collect();

        let exclusion = if cfg.exclusion_lexicon.terms.is_empty() {
            None
        } else {
            Some(compile(&format!(
                r"(?i)\b(?:{})\b",
                phrase_alternation(&cfg.exclusion_lexicon.terms)
            ))?)
        };

        let anchor_alt = phrase_alternation(&cfg.ethnicity_lexicon.anchor_nouns);
        let mut ethnicity_patterns = Vec::new();
        for (name, terms) in &cfg.ethnicity_lexicon.terms {
            let mention = EthnicityMention::parse(name)
                .ok_or_else(|| RulesError::Invalid(format!("unknown ethnicity group `{name}`")))?;
            if terms.is_empty() {
                continue;
            }
            let alt = phrase_alternation(terms);
            let pattern = format!(
                r"(?i)\b(?:(?:{alt})\s+(?:[a-z]+-year-old\s+)?(?:{anchor_alt})s?|of\s+(?:{alt})\s+(?:descent|origin|ancestry|heritage|background))\b"
            );
            ethnicity_patterns.push((mention, compile(&pattern)?));
        }

        let mut adjectives = HashMap::new();
        for (name, adj) in &cfg.ethnicity_lexicon.adjectives {
            let e: Ethnicity = name.parse().map_err(RulesError::Invalid)?;
            adjectives.insert(e, adj.clone());
        }
        for e in Ethnicity::ALL {
            adjectives.entry(e).or_insert_with(|| e.as_str().to_string());
        }

        let mut categories: Vec<(String, Vec<AgeRule>)> = Vec::new();
        for r in &cfg.age_rules.rules {
            if r.kind == AgeRuleKind::Fixed && r.age.is_none() {
                return Err(RulesError::Invalid(format!(
                    "fixed age rule `{}` needs an `age`",
                    r.pattern
                )));
            }
            let rule = AgeRule {
                kind: r.kind,
                regex: compile(&r.pattern)?,
                age: r.age,
            };
            match categories.iter_mut().find(|(c, _)| *c == r.category) {
                Some((_, rules)) => rules.push(rule),
                None => categories.push((r.category.clone(), vec![rule])),
            }
        }

        let compile_all = |ps: &[String]| ps.iter().map(|p| compile(p)).collect::<Result<Vec<_>, _>>();
        let questions = vec![
            (
                QuestionKind::Interpretation,
                compile_all(&cfg.question_patterns.interpretation)?,
            ),
            (QuestionKind::NextStep, compile_all(&cfg.question_patterns.next_step)?),
            (QuestionKind::Diagnosis, compile_all(&cfg.question_patterns.diagnosis)?),
        ];

        Ok(Rules {
            version: cfg.version,
            swap_rows: cfg.gender_lexicon.terms,
            gender_terms,
            verb_singular_to_plural,
            verb_plural_to_singular,
            adverbs: cfg
                .gender_lexicon
                .adverbs
                .words
                .iter()
                .map(|w| w.to_lowercase())
                .collect(),
            exclusion,
            ethnicity_patterns,
            anchor_nouns: cfg
                .ethnicity_lexicon
                .anchor_nouns
                .iter()
                .map(|w| w.to_lowercase())
                .collect(),
            adjectives,
            age_categories: categories.into_iter().map(|(_, r)| r).collect(),
            decade_offsets: cfg.age_rules.decade_offsets,
            questions,
            nontextual: compile_all(&cfg.nontextual.patterns)?,
        })
    }

    pub(crate) fn gender_of_term(&self, lower: &str) -> Option<Gender> {
        self.gender_terms.get(lower).copied()
    }

    // -----------------------------------------------------------------------
    // Age

    /// First matching rule wins, in category order; within a category the
    /// earliest match in the text wins.
    pub fn extract_age(&self, text: &str) -> Option<AgeEstimate> {
        for rules in &self.age_categories {
            let mut best: Option<(usize, f64)> = None;
            for rule in rules {
                for caps in rule.regex.captures_iter(text) {
                    let start = caps.get(0).unwrap().start();
                    if best.is_some_and(|(pos, _)| pos <= start) {
                        break;
                    }
                    if let Some(years) = self.age_value(text, rule, &caps) {
                        best = Some((start, years));
                        break;
                    }
                }
            }
            if let Some((_, years)) = best {
                let years = round2(years);
                return Some(AgeEstimate {
                    years,
                    group: AgeGroup::of_years(years),
                });
            }
        }
        None
    }

    fn age_value(&self, text: &str, rule: &AgeRule, caps: &regex::Captures<'_>) -> Option<f64> {
        let num = |i: usize| caps.get(i).and_then(|m| m.as_str().parse::<f64>().ok());
        let years = match rule.kind {
            // The upper bound of "30-40 years old" is not an exact age.
            AgeRuleKind::Years if RANGE_LEAD.is_match(&text[..caps.get(1)?.start()]) => return None,
            AgeRuleKind::Years => num(1)?,
            AgeRuleKind::Unit => {
                let n = num(1)?;
                let per_year = match caps.get(2)?.as_str().to_lowercase().as_str() {
                    "day" => DAYS_PER_YEAR,
                    "week" => DAYS_PER_YEAR / 7.0,
                    "month" => 12.0,
                    "year" => 1.0,
                    _ => return None,
                };
                n / per_year
            }
            AgeRuleKind::Range => {
                let (a, b) = (num(1)?, num(2)?);
                if a > b {
                    return None;
                }
                (a + b) / 2.0
            }
            AgeRuleKind::Decade => {
                let decade = num(2)? * 10.0;
                let offset = match caps.get(1).map(|m| m.as_str().to_lowercase()) {
                    None => self.decade_offsets.none,
                    Some(q) if q == "early" => self.decade_offsets.early,
                    Some(q) if q == "mid" => self.decade_offsets.mid,
                    Some(_) => self.decade_offsets.late,
                };
                decade + offset
            }
            AgeRuleKind::Fixed => rule.age?,
            AgeRuleKind::Gestation => {
                let weeks = num(1)?;
                ((weeks - FULL_TERM_WEEKS) / (DAYS_PER_YEAR / 7.0)).max(0.0)
            }
        };
        (0.0..=MAX_AGE).contains(&years).then_some(years)
    }

    // -----------------------------------------------------------------------
    // Gender

    pub fn detect_gender(&self, text: &str) -> Gender {
        self.detect_gender_checked(text).gender
    }

    /// Classifies by the first gendered term of the introduction (first)
    /// sentence; Neutral when it has none.
    pub fn detect_gender_checked(&self, text: &str) -> GenderDetection {
        let intro = &text[..first_sentence_end(text)];
        let mut first: Option<Gender> = None;
        let mut warning = None;
        for span in word_spans(intro) {
            let word = split_contraction(span.slice(intro)).0.to_lowercase();
            if let Some(g) = self.gender_of_term(&word) {
                match first {
                    None => first = Some(g),
                    Some(chosen) if chosen != g && warning.is_none() => {
                        warning = Some(AmbiguityWarning {
                            chosen,
                            conflicting_term: span.slice(intro).to_string(),
                        });
                    }
                    Some(_) => {}
                }
            }
        }
        GenderDetection {
            gender: first.unwrap_or(Gender::Neutral),
            warning,
        }
    }

    pub fn detect_exclusions(&self, text: &str) -> bool {
        self.exclusion.as_ref().is_some_and(|r| r.is_match(text))
    }

    /// Earliest explicit ethnicity mention attached to a patient noun.
    pub fn detect_ethnicity(&self, text: &str) -> Option<EthnicityMention> {
        self.ethnicity_patterns
            .iter()
            .filter_map(|(e, r)| r.find(text).map(|m| (m.start(), *e)))
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, e)| e)
    }

    pub fn normalize_question(&self, question: &str) -> QuestionKind {
        self.questions
            .iter()
            .find(|(_, patterns)| patterns.iter().any(|p| p.is_match(question)))
            .map_or(QuestionKind::Other, |(k, _)| *k)
    }

    pub fn has_nontextual_refs(&self, text: &str) -> bool {
        self.nontextual.iter().any(|r| r.is_match(text))
    }

    pub fn extract_features(&self, case: &ClinicalCase) -> CaseFeatures {
        let age = self.extract_age(&case.case_text);
        let gender = self.detect_gender_checked(&case.case_text);
        CaseFeatures {
            case_id: case.id.clone(),
            age_years: age.map(|a| a.years),
            age_group: age.map_or(AgeGroup::Unknown, |a| a.group),
            gender: gender.gender,
            gender_ambiguous: gender.warning.is_some(),
            gender_specific_condition: self.detect_exclusions(&case.case_text),
            ethnicity_mention: self.detect_ethnicity(&case.case_text),
            normalized_question: self.normalize_question(&case.question_raw),
            has_nontextual_refs: self.has_nontextual_refs(&case.case_text)
                || self.has_nontextual_refs(&case.question_raw),
        }
    }
}

const DAYS_PER_YEAR: f64 = 365.25;

static RANGE_LEAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\d\s*(?:-|to|and)\s*$").unwrap());
const FULL_TERM_WEEKS: f64 = 40.0;
const MAX_AGE: f64 = 120.0;

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Renders an age so that [`Rules::extract_age`] reads it back unchanged
/// under the shipped rules.
pub fn render_age(years: f64) -> String {
    if years == 0.0 {
        "newborn".to_string()
    } else if years < 1.0 {
        format!("{}-day-old", (years * DAYS_PER_YEAR).round() as u64)
    } else {
        format!("{years}-year-old")
    }
}

// ---------------------------------------------------------------------------
// Option shuffling

/// Reorders options so that new position `i` holds old option `perm[i]`,
/// remapping the gold index to follow its text.
pub fn apply_permutation(case: &ClinicalCase, perm: [usize; 4]) -> ClinicalCase {
    let mut seen = [false; 4];
    for &p in &perm {
        assert!(p < 4 && !seen[p], "not a permutation: {perm:?}");
        seen[p] = true;
    }
    let mut out = case.clone();
    out.options = perm.map(|old| case.options[old].clone());
    out.correct_index = perm.iter().position(|&old| old == case.correct_index).unwrap();
    out
}

/// The seeded permutation used by [`shuffle_options`] for this case.
pub fn option_permutation(case_id: &str, seed: u64) -> [usize; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, case_id));
    let mut perm = [0, 1, 2, 3];
    perm.shuffle(&mut rng);
    perm
}

/// Deterministic per-case option shuffle.
pub fn shuffle_options(case: &ClinicalCase, seed: u64) -> ClinicalCase {
    apply_permutation(case, option_permutation(&case.id, seed))
}

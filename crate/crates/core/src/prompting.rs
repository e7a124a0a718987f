//! Prompt templates and rendering.
//!
//! Templates are UTF-8 text files with a small front matter block:
//!
//! ```text
//! ---
//! kind: Q
//! placeholders: CLINICAL_CASE, QUESTION, OPTIONS
//! ---
//! === system ===
//! ...system text...
//! === user ===
//! ...user text...
//! ```
//!
//! Placeholders are written `{NAME}`. Each section keeps its bytes exactly,
//! except for the single newline that ends the file. The shipped templates
//! live in `templates/`; a directory of same-named files overrides them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClinicalCase;
use crate::cpv::CaseVariant;
use crate::demographics::Label;
use crate::exec::sha256_hex;

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Z][A-Z_]*)\}").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("placeholder `{{{0}}}` is used but not declared")]
    UndeclaredPlaceholder(String),
    #[error("placeholder `{{{0}}}` is declared but not used")]
    UnusedPlaceholder(String),
    #[error("no value supplied for `{{{0}}}`")]
    MissingPlaceholder(String),
    #[error("value supplied for `{{{0}}}`, which the template does not use")]
    ExtraPlaceholder(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    Exploratory,
    BiasRelevance,
    Q,
    QIF,
    QIFCoT,
    FTMCQ,
    FTXPL,
    NoOptions,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 8] = [
        TemplateKind::Exploratory,
        TemplateKind::BiasRelevance,
        TemplateKind::Q,
        TemplateKind::QIF,
        TemplateKind::QIFCoT,
        TemplateKind::FTMCQ,
        TemplateKind::FTXPL,
        TemplateKind::NoOptions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Exploratory => "Exploratory",
            TemplateKind::BiasRelevance => "BiasRelevance",
            TemplateKind::Q => "Q",
            TemplateKind::QIF => "QIF",
            TemplateKind::QIFCoT => "QIFCoT",
            TemplateKind::FTMCQ => "FTMCQ",
            TemplateKind::FTXPL => "FTXPL",
            TemplateKind::NoOptions => "NoOptions",
        }
    }

    /// File name of the template inside a template directory.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Exploratory => "exploratory.txt",
            TemplateKind::BiasRelevance => "bias_relevance.txt",
            TemplateKind::Q => "q.txt",
            TemplateKind::QIF => "qif.txt",
            TemplateKind::QIFCoT => "qif_cot.txt",
            TemplateKind::FTMCQ => "ft_mcq.txt",
            TemplateKind::FTXPL => "ft_xpl.txt",
            TemplateKind::NoOptions => "no_options.txt",
        }
    }

    /// Whether responses to this kind start with an option letter.
    pub fn expects_label(self) -> bool {
        !matches!(self, TemplateKind::BiasRelevance | TemplateKind::FTXPL | TemplateKind::NoOptions)
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateKind::Exploratory => include_str!("../templates/exploratory.txt"),
            TemplateKind::BiasRelevance => include_str!("../templates/bias_relevance.txt"),
            TemplateKind::Q => include_str!("../templates/q.txt"),
            TemplateKind::QIF => include_str!("../templates/qif.txt"),
            TemplateKind::QIFCoT => include_str!("../templates/qif_cot.txt"),
            TemplateKind::FTMCQ => include_str!("../templates/ft_mcq.txt"),
            TemplateKind::FTXPL => include_str!("../templates/ft_xpl.txt"),
            TemplateKind::NoOptions => include_str!("../templates/no_options.txt"),
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        TemplateKind::ALL
            .into_iter()
            .find(|k| k.as_str().to_lowercase() == key)
            .ok_or_else(|| format!("unknown prompt kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Placeholder {
    ClinicalCase,
    Question,
    Options,
    Solution,
    Specific,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::ClinicalCase,
        Placeholder::Question,
        Placeholder::Options,
        Placeholder::Solution,
        Placeholder::Specific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::ClinicalCase => "CLINICAL_CASE",
            Placeholder::Question => "QUESTION",
            Placeholder::Options => "OPTIONS",
            Placeholder::Solution => "SOLUTION",
            Placeholder::Specific => "SPECIFIC",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, PromptError> {
        Placeholder::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub system_text: String,
    pub user_text: String,
    pub placeholders: BTreeSet<Placeholder>,
}

static BUILTIN: LazyLock<BTreeMap<TemplateKind, PromptTemplate>> = LazyLock::new(|| {
    TemplateKind::ALL
        .into_iter()
        .map(|k| {
            let t = PromptTemplate::parse(k.builtin_source()).expect("shipped template is valid");
            assert_eq!(t.kind, k, "template file declares the wrong kind");
            (k, t)
        })
        .collect()
});

const SYSTEM_MARKER: &str = "=== system ===\n";
const USER_MARKER: &str = "\n=== user ===\n";

impl PromptTemplate {
    pub fn builtin(kind: TemplateKind) -> &'static PromptTemplate {
        &BUILTIN[&kind]
    }

    pub fn parse(source: &str) -> Result<PromptTemplate, PromptError> {
        let malformed = |m: &str| PromptError::Malformed(m.to_string());
        let rest = source
            .strip_prefix("---\n")
            .ok_or_else(|| malformed("missing front matter"))?;
        let (front, body) = rest
            .split_once("\n---\n")
            .ok_or_else(|| malformed("unterminated front matter"))?;
        let mut kind = None;
        let mut declared = BTreeSet::new();
        for line in front.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| malformed(&format!("front matter line `{line}`")))?;
            match key.trim() {
                "kind" => kind = Some(value.trim().parse::<TemplateKind>().map_err(PromptError::Malformed)?),
                "placeholders" => {
                    for name in value.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                        declared.insert(Placeholder::from_name(name)?);
                    }
                }
                other => return Err(malformed(&format!("unknown front matter key `{other}`"))),
            }
        }
        let kind = kind.ok_or_else(|| malformed("front matter has no `kind`"))?;
        let body = body
            .strip_prefix(SYSTEM_MARKER)
            .ok_or_else(|| malformed("missing `=== system ===` section"))?;
        let (system, user) = body
            .split_once(USER_MARKER)
            .ok_or_else(|| malformed("missing `=== user ===` section"))?;
        let user = user.strip_suffix('\n').unwrap_or(user);

        let t = PromptTemplate {
            kind,
            system_text: system.to_string(),
            user_text: user.to_string(),
            placeholders: declared,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<PromptTemplate, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        PromptTemplate::parse(&text)
    }

    /// Placeholders that occur in the texts.
    pub fn used_placeholders(&self) -> Result<BTreeSet<Placeholder>, PromptError> {
        PLACEHOLDER
            .captures_iter(&self.system_text)
            .chain(PLACEHOLDER.captures_iter(&self.user_text))
            .map(|c| Placeholder::from_name(&c[1]))
            .collect()
    }

    /// Checks that the declared and used placeholder sets agree.
    pub fn validate(&self) -> Result<(), PromptError> {
        let used = self.used_placeholders()?;
        if let Some(p) = used.difference(&self.placeholders).next() {
            return Err(PromptError::UndeclaredPlaceholder(p.name().into()));
        }
        if let Some(p) = self.placeholders.difference(&used).next() {
            return Err(PromptError::UnusedPlaceholder(p.name().into()));
        }
        Ok(())
    }

    /// The file form accepted by [`PromptTemplate::parse`].
    pub fn to_file_string(&self) -> String {
        let names: Vec<&str> = self.placeholders.iter().map(|p| p.name()).collect();
        format!(
            "---\nkind: {}\nplaceholders: {}\n---\n{SYSTEM_MARKER}{}{USER_MARKER}{}\n",
            self.kind,
            names.join(", "),
            self.system_text,
            self.user_text
        )
    }
}

/// The eight templates, optionally overridden from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: BUILTIN.clone(),
        }
    }
}

impl TemplateSet {
    /// Shipped templates, replaced by any `<kind>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<TemplateSet, PromptError> {
        let mut set = TemplateSet::default();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let t = PromptTemplate::load(&path)?;
                if t.kind != kind {
                    return Err(PromptError::Malformed(format!(
                        "{} declares kind {}, expected {kind}",
                        path.display(),
                        t.kind
                    )));
                }
                set.templates.insert(kind, t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub system: String,
    pub user: String,
    pub kind: TemplateKind,
    pub content_hash: String,
}

impl ChatPrompt {
    pub fn new(kind: TemplateKind, system: String, user: String) -> Self {
        let content_hash = sha256_hex(&[&system, &user]);
        ChatPrompt {
            system,
            user,
            kind,
            content_hash,
        }
    }
}

/// Options as `A. text` lines.
pub fn format_options(options: &[String; 4]) -> String {
    Label::ALL
        .iter()
        .zip(options)
        .map(|(l, o)| format!("{l}. {o}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn substitute(text: &str, values: &BTreeMap<Placeholder, String>) -> String {
    PLACEHOLDER
        .replace_all(text, |c: &regex::Captures<'_>| {
            let p = Placeholder::from_name(&c[1]).expect("validated template");
            values[&p].clone()
        })
        .into_owned()
}

/// Renders a template for a case. `extra` supplies `SOLUTION` and
/// `SPECIFIC`; case-derived placeholders are filled from the case itself.
pub fn render_case(
    template: &PromptTemplate,
    case: &ClinicalCase,
    extra: &BTreeMap<String, String>,
) -> Result<ChatPrompt, PromptError> {
    let mut values = BTreeMap::new();
    for (name, value) in extra {
        let p = Placeholder::from_name(name)?;
        if matches!(p, Placeholder::ClinicalCase | Placeholder::Question | Placeholder::Options)
            || !template.placeholders.contains(&p)
        {
            return Err(PromptError::ExtraPlaceholder(name.clone()));
        }
        values.insert(p, value.clone());
    }
    for &p in &template.placeholders {
        let value = match p {
            Placeholder::ClinicalCase => case.case_text.clone(),
            Placeholder::Question => case.question_raw.clone(),
            Placeholder::Options => format_options(&case.options),
            Placeholder::Solution | Placeholder::Specific => match values.get(&p) {
                Some(v) => v.clone(),
                None => return Err(PromptError::MissingPlaceholder(p.name().into())),
            },
        };
        values.insert(p, value);
    }
    Ok(ChatPrompt::new(
        template.kind,
        substitute(&template.system_text, &values),
        substitute(&template.user_text, &values),
    ))
}

pub fn render(
    template: &PromptTemplate,
    variant: &CaseVariant,
    extra: &BTreeMap<String, String>,
) -> Result<ChatPrompt, PromptError> {
    render_case(template, &variant.case, extra)
}

/// `SOLUTION` text for explanation fine-tuning: the gold option as `B. text`.
pub fn solution_text(case: &ClinicalCase) -> String {
    format!("{}. {}", case.gold(), case.gold_text())
}

/// Convenience for single-valued extras.
pub fn extra(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

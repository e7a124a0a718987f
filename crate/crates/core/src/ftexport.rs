//! Fine-tuning datasets in chat-message JSONL.
//!
//! MCQ examples teach the bare answer letter; XPL examples teach the
//! explanation given the case and its solution. Only variants whose base
//! case falls in the requested year split are exported, so train,
//! validation and test never share a base case.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpv::{CaseVariant, Split};
use crate::demographics::GroupKey;
use crate::exec::derive_seed;
use crate::prompting::{extra, render, solution_text, PromptError, TemplateKind, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Mcq,
    Xpl,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Mcq => "mcq",
            Paradigm::Xpl => "xpl",
        }
    }

    pub fn template_kind(self) -> TemplateKind {
        match self {
            Paradigm::Mcq => TemplateKind::FTMCQ,
            Paradigm::Xpl => TemplateKind::FTXPL,
        }
    }

    /// Suggested provider fine-tuning settings, recorded in the manifest.
    pub fn hyperparameters(self) -> Hyperparameters {
        match self {
            Paradigm::Mcq => Hyperparameters {
                epochs: 2,
                batch_size: 32,
                learning_rate_multiplier: 0.8,
            },
            Paradigm::Xpl => Hyperparameters {
                epochs: 3,
                batch_size: 2,
                learning_rate_multiplier: 1.8,
            },
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcq" => Ok(Paradigm::Mcq),
            "xpl" => Ok(Paradigm::Xpl),
            other => Err(format!("unknown paradigm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The exchange-format line: `{"messages":[system, user, assistant]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatLine {
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FtExample {
    pub line: ChatLine,
    pub paradigm: Paradigm,
    pub group: GroupKey,
    pub base_id: String,
    pub variant_id: String,
}

impl FtExample {
    pub fn assistant(&self) -> &str {
        &self.line.messages[2].content
    }

    pub fn user(&self) -> &str {
        &self.line.messages[1].content
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FtError {
    /// Gold labels are validated at ingest, so this arises only for
    /// explanation exports of cases whose explanation is empty.
    #[error("variant {variant_id} has no explanation")]
    MissingExplanation { variant_id: String },
    #[error("variant {variant_id} has no publication date")]
    MissingDate { variant_id: String },
    #[error("variant {variant_id}: {message}")]
    Prompt { variant_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtManifest {
    pub paradigm: Paradigm,
    pub split: Split,
    pub balanced: bool,
    pub seed: u64,
    pub template: TemplateKind,
    /// Examples per group before balancing.
    pub available_by_group: BTreeMap<GroupKey, usize>,
    /// Examples per group in the file.
    pub counts_by_group: BTreeMap<GroupKey, usize>,
    pub total: usize,
    pub hyperparameters: Hyperparameters,
    pub skipped: Vec<FtError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtExport {
    pub examples: Vec<FtExample>,
    pub manifest: FtManifest,
}

fn build_example(variant: &CaseVariant, paradigm: Paradigm, templates: &TemplateSet) -> Result<FtExample, FtError> {
    let case = &variant.case;
    let prompt_err = |e: PromptError| FtError::Prompt {
        variant_id: variant.variant_id.clone(),
        message: e.to_string(),
    };
    let template = templates.get(paradigm.template_kind());
    let (prompt, answer) = match paradigm {
        Paradigm::Mcq => (
            render(template, variant, &BTreeMap::new()).map_err(prompt_err)?,
            case.gold().to_string(),
        ),
        Paradigm::Xpl => {
            let explanation = case.explanation.trim();
            if explanation.is_empty() {
                return Err(FtError::MissingExplanation {
                    variant_id: variant.variant_id.clone(),
                });
            }
            let solution = solution_text(case);
            (
                render(template, variant, &extra(&[("SOLUTION", &solution)])).map_err(prompt_err)?,
                explanation.to_string(),
            )
        }
    };
    let msg = |role: &str, content: String| ChatMessage {
        role: role.to_string(),
        content,
    };
    Ok(FtExample {
        line: ChatLine {
            messages: vec![msg("system", prompt.system), msg("user", prompt.user), msg("assistant", answer)],
        },
        paradigm,
        group: GroupKey::exact(variant.spec.gender, variant.spec.ethnicity),
        base_id: variant.base_id.clone(),
        variant_id: variant.variant_id.clone(),
    })
}

fn group_counts(examples: &[FtExample]) -> BTreeMap<GroupKey, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(e.group).or_insert(0) += 1;
    }
    counts
}

/// Downsamples every group to the smallest group's size. Which examples
/// survive depends only on the seed and the group's members, not on input
/// order. Output is sorted by (base id, variant id).
pub fn balance_groups(examples: Vec<FtExample>, seed: u64) -> Vec<FtExample> {
    let mut groups: BTreeMap<GroupKey, Vec<FtExample>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.group).or_default().push(e);
    }
    let min = groups.values().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(min * groups.len());
    for (group, mut members) in groups {
        members.sort_by(|a, b| a.variant_id.cmp(&b.variant_id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &group.to_string()));
        members.shuffle(&mut rng);
        members.truncate(min);
        out.extend(members);
    }
    out.sort_by(|a, b| (&a.base_id, &a.variant_id).cmp(&(&b.base_id, &b.variant_id)));
    out
}

/// Builds the examples of one split. Records that cannot be rendered are
/// listed in the manifest and left out.
pub fn export_ft(
    variants: &[CaseVariant],
    paradigm: Paradigm,
    split: Split,
    balance: bool,
    seed: u64,
    templates: &TemplateSet,
) -> FtExport {
    let mut skipped = Vec::new();
    let mut examples = Vec::new();
    for v in variants {
        match v.case.year() {
            None => skipped.push(FtError::MissingDate {
                variant_id: v.variant_id.clone(),
            }),
            Some(y) if Split::of_year(y) != split => {}
            Some(_) => match build_example(v, paradigm, templates) {
                Ok(e) => examples.push(e),
                Err(e) => skipped.push(e),
            },
        }
    }
    examples.sort_by(|a, b| (&a.base_id, &a.variant_id).cmp(&(&b.base_id, &b.variant_id)));
    let available_by_group = group_counts(&examples);
    if balance {
        examples = balance_groups(examples, seed);
    }
    let manifest = FtManifest {
        paradigm,
        split,
        balanced: balance,
        seed,
        template: paradigm.template_kind(),
        available_by_group,
        counts_by_group: group_counts(&examples),
        total: examples.len(),
        hyperparameters: paradigm.hyperparameters(),
        skipped,
    };
    FtExport { examples, manifest }
}

pub fn write_chat_jsonl<W: Write>(mut w: W, examples: &[FtExample]) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, &e.line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `<paradigm>_<split>.jsonl` and `<paradigm>_<split>.manifest.json`
/// into `dir`, returning both paths.
pub fn save_export(dir: &Path, export: &FtExport) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_{}", export.manifest.paradigm, export.manifest.split);
    let data = dir.join(format!("{stem}.jsonl"));
    let manifest = dir.join(format!("{stem}.manifest.json"));
    let mut w = BufWriter::new(File::create(&data)?);
    write_chat_jsonl(&mut w, &export.examples)?;
    w.flush()?;
    let mut m = BufWriter::new(File::create(&manifest)?);
    serde_json::to_writer_pretty(&mut m, &export.manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok((data, manifest))
}

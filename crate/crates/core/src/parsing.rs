//! Parsing model output into answers and ratings.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demographics::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    /// The response starts with the label, as the prompt asks.
    Clean,
    /// A label was recovered from a looser pattern near the top.
    Salvaged,
    /// No label found; counted as incorrect.
    Unparsed,
}

impl ParseStatus {
    pub const ALL: [ParseStatus; 3] = [ParseStatus::Clean, ParseStatus::Salvaged, ParseStatus::Unparsed];

    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Clean => "clean",
            ParseStatus::Salvaged => "salvaged",
            ParseStatus::Unparsed => "unparsed",
        }
    }
}

impl fmt::Display for ParseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub label: Option<Label>,
    pub explanation: String,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceRating {
    pub score: u8,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RatingError {
    #[error("no leading 0-5 rating in response")]
    UnparsedRating,
}

/// A label as the first token: `B`, `B.`, `(C)`, `[A]`, `**D**`, `B:`.
/// A bare `A` must stand alone on its line or carry punctuation so the
/// article "A ..." is not read as a label.
static CLEAN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?:[\(\[]\s*([ABCD])\s*[\)\]]|\*\*\s*([ABCD])\s*[\.\):]?\s*\*\*|([ABCD])(?:[\.\):\-]|[ \t]*(?:\n|$))|([BCD])[ \t])",
    )
    .unwrap()
});

static SALVAGE: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"(?i:\banswer)\s*(?:(?i:is)|:|-|=)?\s*(?:(?i:option)\s*)?[\(\[\*]*\s*([ABCD])\b",
        r"(?i:\b(?:option|choice))\s*[\(\[]?\s*([ABCD])\b",
        r"[\(\[]([ABCD])[\)\]]",
        r"\*\*([ABCD])\b",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});

static RATING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[\(\[\*]*\s*(\d+)([\.,]\d)?").unwrap());
static LABEL_ONLY_ECHO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^[\s\)\]\*\.:\-]*\(label only\)").unwrap());

fn clean_explanation(rest: &str) -> String {
    rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ':' | '-' | ')' | ']' | '*'))
        .trim_end()
        .to_string()
}

/// Parses a multiple-choice response of the form "label, then explanation".
pub fn parse_mcq(text: &str) -> ParsedAnswer {
    let body = text.trim();
    if let Some(c) = CLEAN.captures(body) {
        let letter = (1..=4).find_map(|i| c.get(i)).expect("one branch matched");
        let label = Label::from_char(letter.as_str().chars().next().unwrap());
        let rest = &body[c.get(0).unwrap().end()..];
        return ParsedAnswer {
            label,
            explanation: clean_explanation(rest),
            parse_status: ParseStatus::Clean,
        };
    }
    let head: String = body.lines().take(3).collect::<Vec<_>>().join("\n");
    let salvaged = SALVAGE
        .iter()
        .filter_map(|r| r.captures(&head))
        .map(|c| c.get(1).unwrap())
        .min_by_key(|m| m.start());
    match salvaged {
        Some(m) => ParsedAnswer {
            label: Label::from_char(m.as_str().chars().next().unwrap()),
            explanation: body.to_string(),
            parse_status: ParseStatus::Salvaged,
        },
        None => ParsedAnswer {
            label: None,
            explanation: body.to_string(),
            parse_status: ParseStatus::Unparsed,
        },
    }
}

/// Parses a 0–5 relevance rating followed by an explanation.
pub fn parse_rating(text: &str) -> Result<RelevanceRating, RatingError> {
    let body = text.trim();
    let c = RATING.captures(body).ok_or(RatingError::UnparsedRating)?;
    if c.get(2).is_some() {
        // "3.5" is not an allowed rating.
        return Err(RatingError::UnparsedRating);
    }
    let score: u8 = c[1].parse().map_err(|_| RatingError::UnparsedRating)?;
    if score > 5 {
        return Err(RatingError::UnparsedRating);
    }
    let mut rest = &body[c.get(0).unwrap().end()..];
    if let Some(m) = LABEL_ONLY_ECHO.find(rest) {
        rest = &rest[m.end()..];
    }
    Ok(RelevanceRating {
        score,
        explanation: clean_explanation(rest),
    })
}

/// Splits a free-text response into its first non-empty line (the answer)
/// and the remaining text (the explanation).
pub fn split_free_answer(text: &str) -> (String, String) {
    let body = text.trim();
    match body.split_once('\n') {
        Some((first, rest)) => (first.trim().to_string(), rest.trim().to_string()),
        None => (body.to_string(), String::new()),
    }
}

//! Source case corpus: ingestion, validation and the canonical JSONL writer.
//!
//! Canonical record layout (one JSON object per line, UTF-8):
//!
//! ```text
//! {"id","case_text","question","options":[4 strings],"answer","explanation","speciality","date","url"}
//! ```
//!
//! `answer` is written as a letter `A`..`D`; on input a 0-based integer index
//! is accepted too. `date` is ISO-8601 (`YYYY-MM-DD`) or null; on input the
//! long form `Month D, YYYY` is also accepted.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::demographics::Label;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at record {record_index}: {message}")]
    Parse { record_index: usize, message: String },
    #[error("schema error at record {record_index}: {reason}")]
    Schema { record_index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Speciality {
    General,
    Cardiology,
    Diagnostic,
    Dermatology,
    Neurology,
    Oncology,
    Ophthalmology,
    Pediatrics,
    Psychiatry,
    Surgery,
}

impl Speciality {
    pub const ALL: [Speciality; 10] = [
        Speciality::General,
        Speciality::Cardiology,
        Speciality::Diagnostic,
        Speciality::Dermatology,
        Speciality::Neurology,
        Speciality::Oncology,
        Speciality::Ophthalmology,
        Speciality::Pediatrics,
        Speciality::Psychiatry,
        Speciality::Surgery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Speciality::General => "General",
            Speciality::Cardiology => "Cardiology",
            Speciality::Diagnostic => "Diagnostic",
            Speciality::Dermatology => "Dermatology",
            Speciality::Neurology => "Neurology",
            Speciality::Oncology => "Oncology",
            Speciality::Ophthalmology => "Ophthalmology",
            Speciality::Pediatrics => "Pediatrics",
            Speciality::Psychiatry => "Psychiatry",
            Speciality::Surgery => "Surgery",
        }
    }
}

impl fmt::Display for Speciality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speciality {
    type Err = String;

    /// Accepts canonical names, the short acronyms (`Cardio`, `Opht`, ...)
    /// and the journal collection titles. Any "Diagnostic Test
    /// Interpretation" collection maps to `Diagnostic` regardless of journal.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_lowercase();
        if lower.contains("diagnostic") || lower == "diag" {
            return Ok(Speciality::Diagnostic);
        }
        let table: [(&[&str], Speciality); 9] = [
            (&["cardio"], Speciality::Cardiology),
            (&["derma"], Speciality::Dermatology),
            (&["neuro"], Speciality::Neurology),
            (&["onco"], Speciality::Oncology),
            (&["opht"], Speciality::Ophthalmology),
            (&["ped", "paed"], Speciality::Pediatrics),
            (&["psych"], Speciality::Psychiatry),
            (&["surg"], Speciality::Surgery),
            (&["gen", "clinical challenge"], Speciality::General),
        ];
        let stripped = lower.trim_start_matches("jama").trim();
        for (prefixes, spec) in table {
            if prefixes.iter().any(|p| stripped.starts_with(p)) {
                return Ok(spec);
            }
        }
        Err(format!("unknown speciality `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalCase {
    pub id: String,
    pub case_text: String,
    pub question_raw: String,
    pub options: [String; 4],
    pub correct_index: usize,
    pub explanation: String,
    pub speciality: Speciality,
    pub date: Option<NaiveDate>,
    pub source_url: Option<String>,
}

impl ClinicalCase {
    pub fn gold(&self) -> Label {
        Label::from_index(self.correct_index).expect("validated correct_index")
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.correct_index]
    }

    pub fn year(&self) -> Option<i32> {
        use chrono::Datelike;
        self.date.map(|d| d.year())
    }
}

/// On-disk record shape shared by JSON and JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub case_text: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: Value,
    #[serde(default)]
    pub explanation: String,
    pub speciality: String,
    #[serde(default)]
    pub date: Option<String>,
    #[serde(default)]
    pub url: Option<String>,
}

impl From<&ClinicalCase> for CaseRecord {
    fn from(c: &ClinicalCase) -> Self {
        CaseRecord {
            id: c.id.clone(),
            case_text: c.case_text.clone(),
            question: c.question_raw.clone(),
            options: c.options.to_vec(),
            answer: Value::String(c.gold().to_string()),
            explanation: c.explanation.clone(),
            speciality: c.speciality.to_string(),
            date: c.date.map(|d| d.format("%Y-%m-%d").to_string()),
            url: c.source_url.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Json,
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(CorpusFormat::Json),
            "jsonl" | "ndjson" => Some(CorpusFormat::Jsonl),
            "csv" => Some(CorpusFormat::Csv),
            _ => None,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(CorpusFormat::Json),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

pub fn parse_answer(v: &Value) -> Result<usize, String> {
    match v {
        Value::Number(n) => match n.as_u64() {
            Some(i) if i < 4 => Ok(i as usize),
            _ => Err(format!("answer index {n} outside 0..=3")),
        },
        Value::String(s) => parse_answer_str(s),
        other => Err(format!("answer must be a letter or index, got {other}")),
    }
}

fn parse_answer_str(s: &str) -> Result<usize, String> {
    let t = s.trim().trim_end_matches(['.', ')']).trim_start_matches('(');
    if t.len() == 1 {
        let c = t.chars().next().unwrap().to_ascii_uppercase();
        if let Some(l) = Label::from_char(c) {
            return Ok(l.index());
        }
        if let Some(d) = c.to_digit(10) {
            if d < 4 {
                return Ok(d as usize);
            }
        }
    }
    Err(format!("unrecognised answer `{s}`"))
}

/// Parses ISO-8601 dates and the `Month D, YYYY` long form.
pub fn parse_date(s: &str) -> Result<NaiveDate, String> {
    let t = s.trim();
    // Full timestamps carry the date in their first ten characters.
    let iso = t.get(..10).unwrap_or(t);
    if let Ok(d) = NaiveDate::parse_from_str(iso, "%Y-%m-%d") {
        return Ok(d);
    }
    for fmt in ["%B %d, %Y", "%b %d, %Y", "%B %d %Y", "%b %d %Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(t, fmt) {
            return Ok(d);
        }
    }
    Err(format!("unrecognised date `{s}`"))
}

impl CaseRecord {
    pub fn into_case(self, record_index: usize) -> Result<ClinicalCase, CorpusError> {
        let schema = |reason: String| CorpusError::Schema {
            record_index,
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(schema("empty id".into()));
        }
        if self.case_text.trim().is_empty() {
            return Err(schema("empty case_text".into()));
        }
        if self.question.trim().is_empty() {
            return Err(schema("empty question".into()));
        }
        if self.options.len() != 4 {
            return Err(schema(format!(
                "expected exactly 4 options, found {}",
                self.options.len()
            )));
        }
        if let Some(i) = self.options.iter().position(|o| o.trim().is_empty()) {
            return Err(schema(format!("option {} is empty", Label::ALL[i])));
        }
        let correct_index = parse_answer(&self.answer).map_err(schema)?;
        let speciality = self.speciality.parse().map_err(schema)?;
        let date = match self.date.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(parse_date(s).map_err(schema)?),
        };
        let options: [String; 4] = self.options.try_into().expect("length checked");
        Ok(ClinicalCase {
            id: self.id,
            case_text: self.case_text,
            question_raw: self.question,
            options,
            correct_index,
            explanation: self.explanation,
            speciality,
            date,
            source_url: self.url.filter(|u| !u.trim().is_empty()),
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a corpus file. Input order is preserved and duplicate ids rejected.
pub fn ingest_cases(path: &Path, format: CorpusFormat) -> Result<Vec<ClinicalCase>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    ingest_str(&text, format)
}

pub fn ingest_str(text: &str, format: CorpusFormat) -> Result<Vec<ClinicalCase>, CorpusError> {
    let records = match format {
        CorpusFormat::Jsonl => parse_jsonl(text)?,
        CorpusFormat::Json => parse_json(text)?,
        CorpusFormat::Csv => parse_csv(text)?,
    };
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let case = r.into_case(i)?;
        if !seen.insert(case.id.clone()) {
            return Err(CorpusError::Schema {
                record_index: i,
                reason: format!("duplicate id `{}`", case.id),
            });
        }
        cases.push(case);
    }
    Ok(cases)
}

fn parse_jsonl(text: &str) -> Result<Vec<CaseRecord>, CorpusError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                record_index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

fn parse_json(text: &str) -> Result<Vec<CaseRecord>, CorpusError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        record_index: 0,
        message: e.to_string(),
    })
}

/// CSV columns are matched by header name: `id, case_text, question,
/// option_a, option_b, option_c, option_d, answer, explanation, speciality,
/// date, url`. `explanation`, `date` and `url` may be absent.
fn parse_csv(text: &str) -> Result<Vec<CaseRecord>, CorpusError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse {
            record_index: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let required = [
        "id",
        "case_text",
        "question",
        "option_a",
        "option_b",
        "option_c",
        "option_d",
        "answer",
        "speciality",
    ];
    for name in required {
        if col(name).is_none() {
            return Err(CorpusError::Parse {
                record_index: 0,
                message: format!("missing CSV column `{name}`"),
            });
        }
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CorpusError::Parse {
            record_index: i,
            message: e.to_string(),
        })?;
        let get = |name: &str| col(name).and_then(|c| row.get(c)).unwrap_or("").to_string();
        let optional = |name: &str| {
            let v = get(name);
            (!v.trim().is_empty()).then_some(v)
        };
        let options: Vec<String> = ["option_a", "option_b", "option_c", "option_d"]
            .iter()
            .map(|n| get(n))
            .collect();
        out.push(CaseRecord {
            id: get("id"),
            case_text: get("case_text"),
            question: get("question"),
            options,
            answer: Value::String(get("answer")),
            explanation: get("explanation"),
            speciality: get("speciality"),
            date: optional("date"),
            url: optional("url"),
        });
    }
    Ok(out)
}

/// Writes the canonical JSONL form.
pub fn write_jsonl<W: Write>(mut w: W, cases: &[ClinicalCase]) -> std::io::Result<()> {
    for c in cases {
        serde_json::to_writer(&mut w, &CaseRecord::from(c))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, cases: &[ClinicalCase]) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, cases).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Streams JSONL records of any deserialisable type, reporting the line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            record_index: i,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}


#[cfg(test)]
pub(crate) use tests::SAMPLE as SAMPLE_RECORD;

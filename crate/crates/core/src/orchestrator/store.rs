//! Append-only results store.
//!
//! `records.jsonl` holds one [`RunRecord`] per line; `index.jsonl` maps each
//! key to its byte offset and is rebuilt whenever it disagrees with the
//! records; `errors.jsonl` logs failed requests. A line is written with a
//! single `write_all` of the full document plus newline, and a torn final
//! line left by a crash is truncated away on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::TokenUsage;
use crate::prompting::TemplateKind;
use crate::statmetrics::OutcomeRecord;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub variant_id: String,
    pub model_id: String,
    pub prompt_kind: TemplateKind,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.variant_id, self.model_id, self.prompt_kind)
    }
}

/// A parsed response plus what is needed to audit it. Wall-clock data
/// (latency, cache hits) is deliberately left out so that the store depends
/// only on what the models answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub outcome: OutcomeRecord,
    pub temperature: f64,
    pub content_hash: String,
    pub response: String,
    /// 0–5 rating for bias-relevance prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<u8>,
    /// Shared content words with the reference explanation, for
    /// explanation prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_overlap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            variant_id: self.outcome.variant_id.clone(),
            model_id: self.outcome.model_id.clone(),
            prompt_kind: self.outcome.prompt_kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    #[serde(flatten)]
    pub key: RecordKey,
    pub content_hash: String,
    pub error: String,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    #[serde(flatten)]
    key: RecordKey,
    offset: u64,
}

#[derive(Debug)]
pub struct ResultsStore {
    dir: PathBuf,
    records: BTreeMap<RecordKey, RunRecord>,
    offsets: BTreeMap<RecordKey, u64>,
    file_len: u64,
    out: BufWriter<File>,
    index: BufWriter<File>,
}

impl ResultsStore {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RECORDS_FILE);
        let (records, offsets, valid_len, lines) = Self::scan(&path)?;
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        if file.metadata()?.len() > valid_len {
            log::warn!("discarding a torn final line in {}", path.display());
            file.set_len(valid_len)?;
        }
        let index_path = dir.join(INDEX_FILE);
        let index_lines = match File::open(&index_path) {
            Ok(f) => BufReader::new(f).lines().count(),
            Err(_) => 0,
        };
        if index_lines != lines {
            let mut w = BufWriter::new(File::create(&index_path)?);
            for (offset, key) in Self::scan_offsets(&path, valid_len)? {
                serde_json::to_writer(&mut w, &IndexLine { key, offset })?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        let index = OpenOptions::new().create(true).append(true).open(&index_path)?;
        Ok(ResultsStore {
            dir: dir.to_path_buf(),
            records,
            offsets,
            file_len: valid_len,
            out: BufWriter::new(file),
            index: BufWriter::new(index),
        })
    }

    /// Reads complete lines; later lines for the same key win.
    #[allow(clippy::type_complexity)]
    fn scan(path: &Path) -> std::io::Result<(BTreeMap<RecordKey, RunRecord>, BTreeMap<RecordKey, u64>, u64, usize)> {
        let mut records = BTreeMap::new();
        let mut offsets = BTreeMap::new();
        let mut valid = 0u64;
        let mut lines = 0;
        let Ok(f) = File::open(path) else {
            return Ok((records, offsets, 0, 0));
        };
        let mut reader = BufReader::new(f);
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 || !buf.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<RunRecord>(buf.trim_end()) {
                Ok(r) => {
                    offsets.insert(r.key(), valid);
                    records.insert(r.key(), r);
                    lines += 1;
                }
                Err(e) => {
                    log::warn!("stopping at unreadable record at byte {valid}: {e}");
                    break;
                }
            }
            valid += n as u64;
        }
        Ok((records, offsets, valid, lines))
    }

    fn scan_offsets(path: &Path, limit: u64) -> std::io::Result<Vec<(u64, RecordKey)>> {
        let mut out = Vec::new();
        let Ok(f) = File::open(path) else {
            return Ok(out);
        };
        let mut reader = BufReader::new(f);
        let mut buf = String::new();
        let mut pos = 0u64;
        while pos < limit {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                break;
            }
            if let Ok(r) = serde_json::from_str::<RunRecord>(buf.trim_end()) {
                out.push((pos, r.key()));
            }
            pos += n as u64;
        }
        Ok(out)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.records.contains_key(key)
    }

    pub fn get(&self, key: &RecordKey) -> Option<&RunRecord> {
        self.records.get(key)
    }

    /// Byte offset of the current record for `key` in `records.jsonl`.
    pub fn offset(&self, key: &RecordKey) -> Option<u64> {
        self.offsets.get(key).copied()
    }

    /// Records in key order.
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.values()
    }

    pub fn outcomes(&self) -> Vec<OutcomeRecord> {
        self.records.values().map(|r| r.outcome.clone()).collect()
    }

    pub fn append(&mut self, record: &RunRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        let key = record.key();
        serde_json::to_writer(
            &mut self.index,
            &IndexLine {
                key: key.clone(),
                offset: self.file_len,
            },
        )?;
        self.index.write_all(b"\n")?;
        self.index.flush()?;
        self.offsets.insert(key.clone(), self.file_len);
        self.file_len += line.len() as u64;
        self.records.insert(key, record.clone());
        Ok(())
    }

    pub fn append_error(&mut self, error: &ErrorRecord) -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(ERRORS_FILE))?;
        let mut line = serde_json::to_vec(error)?;
        line.push(b'\n');
        f.write_all(&line)
    }

    /// Logged errors whose key still has no record, latest per key.
    pub fn outstanding_errors(&self) -> std::io::Result<Vec<ErrorRecord>> {
        let mut latest: BTreeMap<RecordKey, ErrorRecord> = BTreeMap::new();
        if let Ok(f) = File::open(self.dir.join(ERRORS_FILE)) {
            for line in BufReader::new(f).lines() {
                if let Ok(e) = serde_json::from_str::<ErrorRecord>(&line?) {
                    latest.insert(e.key.clone(), e);
                }
            }
        }
        Ok(latest.into_values().filter(|e| !self.contains(&e.key)).collect())
    }

    /// Current records, one line each, in key order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in self.records.values() {
            serde_json::to_writer(&mut out, r).expect("records serialise");
            out.push(b'\n');
        }
        out
    }

    /// Rewrites `records.jsonl` in key order with one line per key, via a
    /// temporary file and rename, and rebuilds the index.
    pub fn compact(&mut self) -> std::io::Result<()> {
        let path = self.dir.join(RECORDS_FILE);
        let tmp = self.dir.join(format!(".{RECORDS_FILE}.tmp"));
        fs::write(&tmp, self.canonical_bytes())?;
        fs::rename(&tmp, &path)?;
        fs::remove_file(self.dir.join(INDEX_FILE)).or_else(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        *self = ResultsStore::open(&self.dir.clone())?;
        Ok(())
    }

    pub fn keys(&self) -> BTreeSet<RecordKey> {
        self.records.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demographics::{Gender, Label};
    use crate::parsing::ParseStatus;

    pub(crate) fn record(variant: &str, answer: &str) -> RunRecord {
        RunRecord {
            outcome: OutcomeRecord {
                variant_id: variant.into(),
                base_id: "b".into(),
                gender: Gender::Male,
                ethnicity: None,
                model_id: "m".into(),
                prompt_kind: TemplateKind::Q,
                predicted: Some(Label::A),
                gold: Label::A,
                correct: true,
                explanation: answer.into(),
                parse_status: ParseStatus::Clean,
            },
            temperature: 0.0,
            content_hash: "h".into(),
            response: format!("A\n{answer}"),
            relevance_score: None,
            word_overlap: None,
            token_usage: None,
        }
    }

    #[test]
    fn append_reopen_and_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = ResultsStore::open(dir.path()).unwrap();
            s.append(&record("v1", "x")).unwrap();
            s.append(&record("v2", "y")).unwrap();
        }
        let s = ResultsStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.contains(&record("v1", "").key()));
        let offset = s.offset(&record("v2", "").key()).unwrap();
        let bytes = fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        let line = std::str::from_utf8(&bytes[offset as usize..]).unwrap().lines().next().unwrap();
        assert_eq!(serde_json::from_str::<RunRecord>(line).unwrap(), record("v2", "y"));
        assert_eq!(fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap().lines().count(), 2);
    }

    #[test]
    fn torn_tail_is_discarded_and_index_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = ResultsStore::open(dir.path()).unwrap();
            s.append(&record("v1", "x")).unwrap();
        }
        let path = dir.path().join(RECORDS_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"variant_id\":\"v2\",\"ba").unwrap();
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let mut s = ResultsStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 1);
        s.append(&record("v3", "z")).unwrap();
        drop(s);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| serde_json::from_str::<RunRecord>(l).is_ok()));
        assert_eq!(ResultsStore::open(dir.path()).unwrap().len(), 2);
        assert_eq!(fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap().lines().count(), 2);
    }

    #[test]
    fn overwrite_keeps_latest_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResultsStore::open(dir.path()).unwrap();
        s.append(&record("v1", "old")).unwrap();
        s.append(&record("v1", "new")).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(&record("v1", "").key()).unwrap().outcome.explanation, "new");
        s.compact().unwrap();
        let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.as_bytes(), s.canonical_bytes().as_slice());
    }

    #[test]
    fn errors_are_outstanding_until_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ResultsStore::open(dir.path()).unwrap();
        let key = record("v1", "").key();
        s.append_error(&ErrorRecord {
            key: key.clone(),
            content_hash: "h".into(),
            error: "boom".into(),
        })
        .unwrap();
        assert_eq!(s.outstanding_errors().unwrap().len(), 1);
        s.append(&record("v1", "x")).unwrap();
        assert!(s.outstanding_errors().unwrap().is_empty());
    }
}

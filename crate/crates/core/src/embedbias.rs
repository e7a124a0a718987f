//! Embedding-space gender-bias measurement.
//!
//! A gender direction g is the first principal component of the differences
//! between embeddings of gender-swapped sentence pairs. Texts are scored by
//! their scalar projection onto g (GenderBias) and by importance-weighted
//! cosine alignment of their words with g (BiasScore).
//!
//! Embeddings come from one of three sources: a JSONL cache file written by
//! an external embedding job, an OpenAI-compatible embeddings endpoint, or a
//! deterministic hashed mock for tests. Every text is addressed by
//! [`text_id`], the hex SHA-256 of its exact bytes, so request files, cache
//! files and in-process lookups all agree on ids.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Speciality;
use crate::demographics::{Ethnicity, Gender, GroupKey};
use crate::exec::{derive_seed, map_collect, sha256_hex, ExecMode};
use crate::text::lower_words;

pub const DEFAULT_WINDOW_TOKENS: usize = 68;
pub const DEFAULT_WINDOW_STEP: usize = 32;
pub const DEFAULT_MOCK_DIMENSION: usize = 64;
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
/// Sentences whose embedding difference fixes the sign of the direction.
pub const FEMININE_PROBE: (&str, &str) = ("she is here", "he is here");

pub const DEFAULT_PAIRS_JSONL: &str = include_str!("../data/gender_pairs.jsonl");
pub const DEFAULT_GENDER_WORDS: &str = include_str!("../data/gender_words.txt");

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no embedding for {} id(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingEmbedding(Vec<String>),
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch { expected: usize, found: usize, context: String },
    #[error("text has no tokens")]
    EmptyText,
    #[error("invalid window: M = {m}, S = {s} (need M > 0 and 0 < S <= M)")]
    InvalidWindow { m: usize, s: usize },
    #[error("need at least 2 sentence pairs, got {0}")]
    TooFewPairs(usize),
    #[error("difference vectors have zero variance")]
    DegenerateDirection,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stable id of a text in request and cache files.
pub fn text_id(text: &str) -> String {
    sha256_hex(&[text])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub source_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

// ---------------------------------------------------------------------------
// Sources

/// Cache file contents: `{"id": ..., "vector": [...]}` per line, optionally
/// preceded by a `{"dimension": D}` header line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    dimension: Option<usize>,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequestLine {
    pub id: String,
    pub text: String,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<(), EmbedError> {
        let d = *self.dimension.get_or_insert(vector.len());
        if vector.len() != d {
            return Err(EmbedError::DimensionMismatch {
                expected: d,
                found: vector.len(),
                context: format!("id {id}"),
            });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, EmbedError> {
        let mut cache = EmbeddingCache::new();
        let mut first = true;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if std::mem::take(&mut first) {
                if let Ok(h) = serde_json::from_str::<CacheHeader>(&line) {
                    cache.dimension = Some(h.dimension);
                    continue;
                }
            }
            let rec: CacheLine = serde_json::from_str(&line).map_err(|e| EmbedError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::Parse {
                    line: line_no,
                    message: format!("non-finite entry for id {}", rec.id),
                });
            }
            cache.insert(rec.id, rec.vector).map_err(|e| match e {
                EmbedError::DimensionMismatch { expected, found, .. } => EmbedError::DimensionMismatch {
                    expected,
                    found,
                    context: format!("line {line_no}"),
                },
                other => other,
            })?;
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    /// Writes the header and records sorted by id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EmbedError> {
        if let Some(d) = self.dimension {
            serde_json::to_writer(&mut w, &CacheHeader { dimension: d }).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        for id in ids {
            let line = CacheLine {
                id: id.clone(),
                vector: self.vectors[id].clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Writes one `{"id","text"}` line per distinct text, sorted by id, for an
/// external embedding job. Returns the number of lines written.
pub fn write_embed_requests<W: Write>(mut w: W, texts: &[&str]) -> Result<usize, EmbedError> {
    let unique: BTreeMap<String, &str> = texts.iter().map(|t| (text_id(t), *t)).collect();
    for (id, text) in &unique {
        let line = EmbedRequestLine {
            id: id.clone(),
            text: text.to_string(),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(unique.len())
}

/// Deterministic stand-in for a sentence encoder: each lowercase token gets
/// a Gaussian vector seeded by the token; a text is the normalised mean of
/// its token vectors. Shared words therefore give similar embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededMock {
    pub dimension: usize,
    pub seed: u64,
}

impl SeededMock {
    pub fn new(dimension: usize, seed: u64) -> Self {
        SeededMock { dimension, seed }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let tokens = lower_words(text);
        if tokens.is_empty() {
            self.token_vector(text.trim(), &mut v);
        } else {
            for t in &tokens {
                self.token_vector(t, &mut v);
            }
        }
        let norm = norm(&v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// OpenAI-compatible `POST {base_url}/embeddings`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderEmbedder {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingsDatum>,
}

#[derive(Deserialize)]
struct EmbeddingsDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl ProviderEmbedder {
    fn embed_batch(&self, client: &reqwest::blocking::Client, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut req = client
            .post(url)
            .json(&serde_json::json!({ "model": self.model, "input": texts }));
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var).map_err(|_| EmbedError::Provider(format!("{var} is not set")))?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Provider(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Provider(format!("HTTP {status}")));
        }
        let body: EmbeddingsResponse = resp.json().map_err(|e| EmbedError::Provider(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::Provider(format!(
                "{} embeddings for {} inputs",
                body.data.len(),
                texts.len()
            )));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, d) in body.data.into_iter().enumerate() {
            let i = d.index.unwrap_or(pos);
            if i >= out.len() {
                return Err(EmbedError::Provider(format!("index {i} out of range")));
            }
            out[i] = d.embedding;
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size.max(1)) {
            out.extend(self.embed_batch(&client, chunk)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Cache(EmbeddingCache),
    Provider(ProviderEmbedder),
    SeededMock(SeededMock),
}

impl EmbeddingSource {
    fn raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        match self {
            EmbeddingSource::Cache(cache) => {
                let ids: Vec<String> = texts.iter().map(|t| text_id(t)).collect();
                let missing: BTreeSet<&String> = ids.iter().filter(|id| cache.get(id).is_none()).collect();
                if !missing.is_empty() {
                    return Err(EmbedError::MissingEmbedding(missing.into_iter().cloned().collect()));
                }
                Ok(ids.iter().map(|id| cache.get(id).expect("checked").to_vec()).collect())
            }
            EmbeddingSource::Provider(p) => p.embed_texts(texts),
            EmbeddingSource::SeededMock(m) => Ok(texts.iter().map(|t| m.embed_text(t)).collect()),
        }
    }
}

/// Embeds texts, checking that every vector has the same finite dimension.
pub fn embed(texts: &[&str], source: &EmbeddingSource) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let raw = source.raw(texts)?;
    let mut dim = None;
    texts
        .iter()
        .zip(raw)
        .map(|(t, values)| {
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(EmbedError::DimensionMismatch {
                    expected: d,
                    found: values.len(),
                    context: format!("text {t:?}"),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::Provider(format!("non-finite embedding for {t:?}")));
            }
            Ok(EmbeddingVector {
                source_id: text_id(t),
                values,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Vector helpers

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn check_dim(expected: usize, found: usize, context: &str) -> Result<(), EmbedError> {
    if expected != found {
        return Err(EmbedError::DimensionMismatch {
            expected,
            found,
            context: context.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sentence pairs and the gender direction

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub original: String,
    pub swapped: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SentencePairSet {
    pub pairs: Vec<SentencePair>,
}

static DEFAULT_PAIRS: LazyLock<SentencePairSet> =
    LazyLock::new(|| SentencePairSet::parse(DEFAULT_PAIRS_JSONL).expect("built-in pair file is valid"));

impl SentencePairSet {
    /// The shipped 100 template pairs (masculine original, feminine swap).
    pub fn builtin() -> &'static SentencePairSet {
        &DEFAULT_PAIRS
    }

    pub fn parse(jsonl: &str) -> Result<Self, EmbedError> {
        let mut pairs = Vec::new();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(line).map_err(|e| EmbedError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(SentencePairSet { pairs })
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Originals and swaps exchanged.
    pub fn reversed(&self) -> Self {
        SentencePairSet {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    original: p.swapped.clone(),
                    swapped: p.original.clone(),
                })
                .collect(),
        }
    }

    /// All sentences, plus the orientation probe, that the direction needs.
    pub fn texts(&self) -> Vec<&str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.original.as_str(), p.swapped.as_str()])
            .chain([FEMININE_PROBE.0, FEMININE_PROBE.1])
            .collect()
    }
}

/// How the sign of the principal component is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// embed("she is here") − embed("he is here") projects non-negatively.
    FemininePositive,
    /// The first difference vector projects non-negatively; exchanging
    /// originals and swaps flips the direction.
    FirstPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderDirection {
    /// Unit-norm direction.
    pub g: Vec<f64>,
    pub explained_variance_ratio: f64,
    pub orientation: Orientation,
    pub iterations: usize,
    pub converged: bool,
}

impl GenderDirection {
    pub fn dimension(&self) -> usize {
        self.g.len()
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| EmbedError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// First principal component of the difference vectors.
///
/// Each difference d_i enters as the symmetric pair {+d_i/2, −d_i/2}, whose
/// mean is zero by construction; the covariance is then proportional to
/// Σ d_i d_iᵀ. Unlike centring the d_i themselves, this keeps a
/// consistently signed pair set (all d_i ≈ u) from collapsing to zero
/// variance, and identical d_i give an explained-variance ratio of exactly 1.
///
/// `probe` is the feminine-minus-masculine probe difference and is required
/// for [`Orientation::FemininePositive`].
pub fn compute_gender_direction(
    diffs: &[Vec<f64>],
    orientation: Orientation,
    probe: Option<&[f64]>,
) -> Result<GenderDirection, EmbedError> {
    if diffs.len() < 2 {
        return Err(EmbedError::TooFewPairs(diffs.len()));
    }
    let d = diffs[0].len();
    for (i, v) in diffs.iter().enumerate() {
        check_dim(d, v.len(), &format!("difference {i}"))?;
    }
    let n = diffs.len() as f64;
    let trace: f64 = diffs.iter().map(|v| dot(v, v)).sum::<f64>() / n;
    if trace <= f64::MIN_POSITIVE || d == 0 {
        return Err(EmbedError::DegenerateDirection);
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for x in diffs {
            let p = dot(x, v) / n;
            out.iter_mut().zip(x).for_each(|(o, xi)| *o += p * xi);
        }
        out
    };
    let start = diffs
        .iter()
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .expect("non-empty");
    let mut v: Vec<f64> = start.iter().map(|x| x / norm(start)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < POWER_MAX_ITERATIONS {
        iterations += 1;
        let mut w = apply(&v);
        let wn = norm(&w);
        if wn == 0.0 {
            return Err(EmbedError::DegenerateDirection);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let change = v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if change < POWER_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power iteration did not converge in {POWER_MAX_ITERATIONS} iterations");
    }
    let lambda = dot(&v, &apply(&v));
    let ratio = (lambda / trace).clamp(0.0, 1.0);

    let reference: &[f64] = match orientation {
        Orientation::FemininePositive => {
            let p = probe.ok_or_else(|| EmbedError::Provider("feminine orientation needs the probe".into()))?;
            check_dim(d, p.len(), "orientation probe")?;
            p
        }
        Orientation::FirstPair => &diffs[0],
    };
    if dot(reference, &v) < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(GenderDirection {
        g: v,
        explained_variance_ratio: ratio,
        orientation,
        iterations,
        converged,
    })
}

/// Embeds the pair set and the probe sentences and computes the direction.
pub fn direction_from_pairs(
    pairs: &SentencePairSet,
    source: &EmbeddingSource,
    orientation: Orientation,
) -> Result<GenderDirection, EmbedError> {
    if pairs.pairs.len() < 2 {
        return Err(EmbedError::TooFewPairs(pairs.pairs.len()));
    }
    let vecs = embed(&pairs.texts(), source)?;
    let (pair_vecs, probe) = vecs.split_at(2 * pairs.pairs.len());
    let diffs: Vec<Vec<f64>> = pair_vecs
        .chunks(2)
        .map(|c| c[0].values.iter().zip(&c[1].values).map(|(a, b)| a - b).collect())
        .collect();
    let probe: Vec<f64> = probe[0].values.iter().zip(&probe[1].values).map(|(a, b)| a - b).collect();
    compute_gender_direction(&diffs, orientation, Some(&probe))
}

/// Scalar projection e·g/|g|; positive leans feminine.
pub fn gender_bias(e: &[f64], dir: &GenderDirection) -> Result<f64, EmbedError> {
    check_dim(dir.dimension(), e.len(), "gender_bias")?;
    let gn = norm(&dir.g);
    Ok(dot(e, &dir.g) / gn)
}

// ---------------------------------------------------------------------------
// Sliding windows

/// Window start offsets for a text of `n` whitespace tokens. A text of at
/// most `m` tokens is one window; otherwise windows start at 0, s, 2s, ...
/// and every window starts more than `s` tokens before the end.
pub fn window_starts(n: usize, m: usize, s: usize) -> Result<Vec<usize>, EmbedError> {
    if m == 0 || s == 0 || s > m {
        return Err(EmbedError::InvalidWindow { m, s });
    }
    if n == 0 {
        return Err(EmbedError::EmptyText);
    }
    if n <= m {
        return Ok(vec![0]);
    }
    Ok((0..).map(|k| k * s).take_while(|&start| start + s < n).collect())
}

/// Window texts. A short text is returned trimmed but otherwise verbatim, so
/// its window embedding is the embedding of the text itself; longer windows
/// are their tokens joined by single spaces.
pub fn window_texts(text: &str, m: usize, s: usize) -> Result<Vec<String>, EmbedError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let starts = window_starts(tokens.len(), m, s)?;
    if tokens.len() <= m {
        return Ok(vec![text.trim().to_string()]);
    }
    Ok(starts
        .into_iter()
        .map(|st| tokens[st..(st + m).min(tokens.len())].join(" "))
        .collect())
}

/// Element-wise mean; a single vector is returned unchanged.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    match vectors {
        [] => Vec::new(),
        [one] => one.clone(),
        _ => {
            let n = vectors.len() as f64;
            let mut out = vec![0.0; vectors[0].len()];
            for v in vectors {
                out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            }
            out.iter_mut().for_each(|o| *o /= n);
            out
        }
    }
}

/// Mean of the window embeddings of `text`.
pub fn sliding_window_embed(
    text: &str,
    m: usize,
    s: usize,
    source: &EmbeddingSource,
) -> Result<EmbeddingVector, EmbedError> {
    let windows = window_texts(text, m, s)?;
    let refs: Vec<&str> = windows.iter().map(String::as_str).collect();
    let vecs: Vec<Vec<f64>> = embed(&refs, source)?.into_iter().map(|e| e.values).collect();
    Ok(EmbeddingVector {
        source_id: text_id(text.trim()),
        values: mean_vector(&vecs),
    })
}

// ---------------------------------------------------------------------------
// Word importance and BiasScore

/// Parses a word list: one word per line, `#` comments, case-folded.
pub fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn default_gender_words() -> HashSet<String> {
    parse_word_list(DEFAULT_GENDER_WORDS)
}

/// Corpus TF-IDF importance per word: mean relative term frequency times
/// the smooth IDF ln((1 + N) / (1 + df)) + 1, rescaled so the mean over the
/// vocabulary is 1.
pub fn tfidf_importance(docs: &[&str]) -> HashMap<String, f64> {
    let n = docs.len() as f64;
    let mut tf: BTreeMap<String, f64> = BTreeMap::new();
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        let words = lower_words(doc);
        if words.is_empty() {
            continue;
        }
        let len = words.len() as f64;
        let mut seen = HashSet::new();
        for w in words {
            *tf.entry(w.clone()).or_insert(0.0) += 1.0 / len;
            if seen.insert(w.clone()) {
                *df.entry(w).or_insert(0) += 1;
            }
        }
    }
    let raw: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(w, t)| {
            let idf = ((1.0 + n) / (1.0 + df[&w] as f64)).ln() + 1.0;
            (w, t / n * idf)
        })
        .collect();
    let mean = raw.iter().map(|(_, v)| v).sum::<f64>() / raw.len().max(1) as f64;
    raw.into_iter()
        .map(|(w, v)| (w, if mean > 0.0 { v / mean } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasResult {
    pub gender_bias: f64,
    /// Sum of the negative word contributions (≤ 0).
    pub male_bias_score: f64,
    /// Sum of the positive word contributions (≥ 0).
    pub female_bias_score: f64,
    /// (male + female) / 2 for this case.
    pub median_bias_score: f64,
    /// Words skipped for lack of an importance weight.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_importance: Vec<String>,
}

/// Splits weighted cosines c_w = cos(e_w, g)·I_w into (male, female) sums.
pub fn bias_components<'a, I>(contributions: I) -> (f64, f64)
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: 'a,
{
    let mut male = 0.0;
    let mut female = 0.0;
    for c in contributions {
        if c > 0.0 {
            female += c;
        } else if c < 0.0 {
            male += c;
        }
    }
    (male, female)
}

/// Settings shared by every case scored in one analysis.
pub struct BiasScorer<'a> {
    pub direction: &'a GenderDirection,
    pub importance: &'a HashMap<String, f64>,
    pub excluded: &'a HashSet<String>,
    pub source: &'a EmbeddingSource,
    pub window_tokens: usize,
    pub window_step: usize,
}

impl BiasScorer<'_> {
    /// Unique non-excluded words of a text, sorted.
    pub fn scored_words(&self, text: &str) -> Vec<String> {
        let words: BTreeSet<String> = lower_words(text).into_iter().filter(|w| !self.excluded.contains(w)).collect();
        words.into_iter().collect()
    }

    /// Every text the scorer will embed for `text` (windows and words).
    pub fn required_texts(&self, text: &str) -> Result<Vec<String>, EmbedError> {
        let mut out = window_texts(text, self.window_tokens, self.window_step)?;
        out.extend(self.scored_words(text));
        Ok(out)
    }

    pub fn score(&self, text: &str) -> Result<BiasResult, EmbedError> {
        let case = sliding_window_embed(text, self.window_tokens, self.window_step, self.source)?;
        let gender_bias = gender_bias(&case.values, self.direction)?;
        let mut missing = Vec::new();
        let mut weighted = Vec::new();
        for w in self.scored_words(text) {
            match self.importance.get(&w) {
                Some(&i) => weighted.push((w, i)),
                None => missing.push(w),
            }
        }
        if !missing.is_empty() {
            log::warn!("{} word(s) without importance skipped, e.g. `{}`", missing.len(), missing[0]);
        }
        let words: Vec<&str> = weighted.iter().map(|(w, _)| w.as_str()).collect();
        let vecs = embed(&words, self.source)?;
        let mut contributions = Vec::with_capacity(vecs.len());
        for (v, (_, i)) in vecs.iter().zip(&weighted) {
            check_dim(self.direction.dimension(), v.dimension(), "word embedding")?;
            contributions.push(cosine(&v.values, &self.direction.g) * i);
        }
        let (male, female) = bias_components(contributions);
        Ok(BiasResult {
            gender_bias,
            male_bias_score: male,
            female_bias_score: female,
            median_bias_score: (male + female) / 2.0,
            missing_importance: missing,
        })
    }

    /// Scores many texts; results are in input order.
    pub fn score_all(&self, texts: &[&str], mode: ExecMode) -> Vec<Result<BiasResult, EmbedError>>
    where
        Self: Sync,
    {
        map_collect(mode, texts, |t| self.score(t))
    }
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    // Sorting first makes the mean independent of input order.
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Corpus MB = (1/n) Σ (male_i + female_i)/2; `None` for an empty corpus.
pub fn median_bias_score(results: &[BiasResult]) -> Option<f64> {
    if results.is_empty() {
        return None;
    }
    Some(sorted_mean(results.iter().map(|r| r.median_bias_score).collect()))
}

// ---------------------------------------------------------------------------
// Aggregation

/// A scored variant with the metadata aggregation slices on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub variant_id: String,
    pub base_id: String,
    pub gender: Gender,
    pub ethnicity: Option<Ethnicity>,
    pub speciality: Speciality,
    #[serde(flatten)]
    pub result: BiasResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateBy {
    Gender,
    Ethnicity,
    GenderXEthnicity,
    Speciality,
}

impl AggregateBy {
    /// Every possible cell label, in a fixed order.
    pub fn cells(self) -> Vec<String> {
        match self {
            AggregateBy::Gender => Gender::ALL.iter().map(|g| GroupKey::gender(*g).to_string()).collect(),
            AggregateBy::Ethnicity => crate::demographics::BiasAttribute::Ethnicity
                .groups()
                .iter()
                .map(ToString::to_string)
                .collect(),
            AggregateBy::GenderXEthnicity => Gender::ALL
                .iter()
                .flat_map(|g| {
                    Ethnicity::ALL
                        .iter()
                        .map(|e| Some(*e))
                        .chain([None])
                        .map(move |e| GroupKey::exact(*g, e).to_string())
                })
                .collect(),
            AggregateBy::Speciality => Speciality::ALL.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn cell_of(self, c: &ScoredCase) -> String {
        match self {
            AggregateBy::Gender => GroupKey::gender(c.gender).to_string(),
            AggregateBy::Ethnicity => GroupKey::ethnicity(c.ethnicity).to_string(),
            AggregateBy::GenderXEthnicity => GroupKey::exact(c.gender, c.ethnicity).to_string(),
            AggregateBy::Speciality => c.speciality.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub n: usize,
    pub mean_gender_bias: f64,
    pub mean_male_bias_score: f64,
    pub mean_female_bias_score: f64,
    pub median_bias_score: f64,
}

impl BiasCell {
    fn of(cases: &[&ScoredCase]) -> Option<Self> {
        if cases.is_empty() {
            return None;
        }
        let m = |f: fn(&BiasResult) -> f64| sorted_mean(cases.iter().map(|c| f(&c.result)).collect());
        Some(BiasCell {
            n: cases.len(),
            mean_gender_bias: m(|r| r.gender_bias),
            mean_male_bias_score: m(|r| r.male_bias_score),
            mean_female_bias_score: m(|r| r.female_bias_score),
            median_bias_score: m(|r| r.median_bias_score),
        })
    }
}

/// One row per cell label; `None` marks a cell with no cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub dimension: AggregateBy,
    pub rows: Vec<(String, Option<BiasCell>)>,
}

pub fn aggregate_bias(results: &[ScoredCase], dimension: AggregateBy) -> BiasTable {
    let mut by_cell: HashMap<String, Vec<&ScoredCase>> = HashMap::new();
    for c in results {
        by_cell.entry(dimension.cell_of(c)).or_default().push(c);
    }
    BiasTable {
        dimension,
        rows: dimension
            .cells()
            .into_iter()
            .map(|label| {
                let cell = by_cell.get(&label).and_then(|v| BiasCell::of(v));
                (label, cell)
            })
            .collect(),
    }
}

/// Speciality × group matrix of cells; rows sorted by case count
/// (descending, ties by name), columns in `columns.cells()` order. Only
/// specialities with at least one case appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasHeatmap {
    pub columns: Vec<String>,
    pub rows: Vec<HeatmapRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub speciality: Speciality,
    pub n: usize,
    pub cells: Vec<Option<BiasCell>>,
}

pub fn bias_heatmap(results: &[ScoredCase], columns: AggregateBy) -> BiasHeatmap {
    let mut by_spec: BTreeMap<Speciality, Vec<ScoredCase>> = BTreeMap::new();
    for c in results {
        by_spec.entry(c.speciality).or_default().push(c.clone());
    }
    let mut rows: Vec<HeatmapRow> = by_spec
        .into_iter()
        .map(|(speciality, cases)| {
            let table = aggregate_bias(&cases, columns);
            HeatmapRow {
                speciality,
                n: cases.len(),
                cells: table.rows.into_iter().map(|(_, c)| c).collect(),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.n.cmp(&a.n).then(a.speciality.as_str().cmp(b.speciality.as_str())));
    BiasHeatmap {
        columns: columns.cells(),
        rows,
    }
}

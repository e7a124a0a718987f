//! Experiment configuration files.
//!
//! Relative paths inside a config file are resolved against the file's own
//! directory, so a config and its corpus can move together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusFormat;
use crate::cpv::FilterConfig;
use crate::demographics::{parse_optional_ethnicity, BiasAttribute, Ethnicity, Gender};
use crate::embedbias::{
    EmbeddingCache, EmbeddingSource, Orientation, ProviderEmbedder, SeededMock, SentencePairSet,
    DEFAULT_MOCK_DIMENSION, DEFAULT_WINDOW_STEP, DEFAULT_WINDOW_TOKENS,
};
use crate::extraction::Rules;
use crate::gateway::{GatewayConfig, ModelSpec, Provider, RetryPolicy};
use crate::prompting::{TemplateKind, TemplateSet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Toml(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Analyses the report can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Accuracy,
    EoCv,
    Skewsize,
    Shap,
    EmbedBias,
    Ablation,
    /// Words unique to each group's responses.
    Wordcloud,
}

impl Analysis {
    pub const ALL: [Analysis; 7] = [
        Analysis::Accuracy,
        Analysis::EoCv,
        Analysis::Skewsize,
        Analysis::Shap,
        Analysis::EmbedBias,
        Analysis::Ablation,
        Analysis::Wordcloud,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Analysis::Accuracy => "accuracy",
            Analysis::EoCv => "eo_cv",
            Analysis::Skewsize => "skewsize",
            Analysis::Shap => "shap",
            Analysis::EmbedBias => "embed_bias",
            Analysis::Ablation => "ablation",
            Analysis::Wordcloud => "wordcloud",
        }
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Analysis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Analysis::ALL
            .into_iter()
            .find(|a| a.as_str() == key)
            .ok_or_else(|| format!("unknown analysis `{s}`"))
    }
}

fn default_genders() -> Vec<Gender> {
    Gender::ALL.to_vec()
}

fn default_ethnicities() -> Vec<String> {
    vec!["None".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpvConfig {
    #[serde(default = "default_genders")]
    pub genders: Vec<Gender>,
    /// Ethnicity names; `None` means no stated ethnicity.
    #[serde(default = "default_ethnicities")]
    pub ethnicities: Vec<String>,
}

impl Default for CpvConfig {
    fn default() -> Self {
        CpvConfig {
            genders: default_genders(),
            ethnicities: default_ethnicities(),
        }
    }
}

impl CpvConfig {
    pub fn ethnicity_list(&self) -> Result<Vec<Option<Ethnicity>>, ConfigError> {
        self.ethnicities
            .iter()
            .map(|e| parse_optional_ethnicity(e).map_err(invalid))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSourceKind {
    Cache,
    Provider,
    Mock,
}

fn default_dimension() -> usize {
    DEFAULT_MOCK_DIMENSION
}
fn default_window_tokens() -> usize {
    DEFAULT_WINDOW_TOKENS
}
fn default_window_step() -> usize {
    DEFAULT_WINDOW_STEP
}
fn default_orientation() -> Orientation {
    Orientation::FemininePositive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub source: EmbeddingSourceKind,
    /// Cache file for `source = "cache"`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Vector size for `source = "mock"`.
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub provider: Option<ProviderEmbedder>,
    /// Sentence-pair file; defaults to the shipped pairs.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
    /// Gender word list excluded from BiasScore; defaults to the shipped list.
    #[serde(default)]
    pub gender_words: Option<PathBuf>,
    #[serde(default = "default_window_tokens")]
    pub window_tokens: usize,
    #[serde(default = "default_window_step")]
    pub window_step: usize,
    #[serde(default = "default_orientation")]
    pub orientation: Orientation,
}

fn default_true() -> bool {
    true
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    /// Cache responses under `<run dir>/cache`.
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub requests_per_minute: BTreeMap<Provider, f64>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            cache: true,
            retry: RetryPolicy::default(),
            requests_per_minute: BTreeMap::new(),
            timeout_secs: default_timeout(),
        }
    }
}

fn default_analyses() -> Vec<Analysis> {
    vec![
        Analysis::Accuracy,
        Analysis::EoCv,
        Analysis::Skewsize,
        Analysis::Shap,
        Analysis::Ablation,
        Analysis::Wordcloud,
    ]
}
fn default_attributes() -> Vec<BiasAttribute> {
    vec![BiasAttribute::Gender]
}
fn default_min_df() -> usize {
    crate::wordshap::DEFAULT_MIN_DF
}
fn default_top_k() -> usize {
    5
}
fn default_relevance() -> BiasAttribute {
    BiasAttribute::Gender
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    /// Attributes the metrics are sliced on.
    #[serde(default = "default_attributes")]
    pub attributes: Vec<BiasAttribute>,
    #[serde(default = "default_min_df")]
    pub shap_min_df: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Attribute named in bias-relevance prompts.
    #[serde(default = "default_relevance")]
    pub relevance_attribute: BiasAttribute,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            analyses: default_analyses(),
            attributes: default_attributes(),
            shap_min_df: default_min_df(),
            top_k: default_top_k(),
            relevance_attribute: default_relevance(),
        }
    }
}

fn default_prompt_kinds() -> Vec<TemplateKind> {
    vec![TemplateKind::Q]
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_parallel() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under `output_dir`.
    pub name: String,
    pub corpus: PathBuf,
    /// `json`, `jsonl` or `csv`; inferred from the extension when absent.
    #[serde(default)]
    pub corpus_format: Option<String>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub cpv: CpvConfig,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_prompt_kinds")]
    pub prompt_kinds: Vec<TemplateKind>,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallel")]
    pub max_parallel_requests: usize,
    #[serde(default)]
    pub seed: u64,
    /// Permute answer options per base case (seeded).
    #[serde(default)]
    pub shuffle_options: bool,
    /// Replacement rule file for extraction and rewriting.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    /// Directory of template overrides.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Re-query keys that already have a stored record.
    #[serde(default)]
    pub overwrite: bool,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join(&self.name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty()
            || self.name.starts_with('.')
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(invalid(format!(
                "name `{}` must be a directory token of letters, digits, `-`, `_` or `.`",
                self.name
            )));
        }
        self.corpus_format()?;
        if self.cpv.genders.is_empty() || self.cpv.ethnicities.is_empty() {
            return Err(invalid("cpv.genders and cpv.ethnicities must be non-empty"));
        }
        self.cpv.ethnicity_list()?;
        if let Some(r) = &self.filter.year_range {
            r.validate().map_err(|e| invalid(e.to_string()))?;
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.models {
            if !ids.insert(m.model_id.as_str()) {
                return Err(invalid(format!("duplicate model_id `{}`", m.model_id)));
            }
            if !m.temperature.is_finite() || m.temperature < 0.0 {
                return Err(invalid(format!("model `{}` has invalid temperature", m.model_id)));
            }
            match (&m.mock, m.provider) {
                (None, Provider::Mock) => {
                    return Err(invalid(format!("mock model `{}` needs a [models.mock] profile", m.model_id)))
                }
                (Some(p), Provider::Mock) => p.validate().map_err(invalid)?,
                (Some(_), _) => return Err(invalid(format!("model `{}` is not a mock but has a profile", m.model_id))),
                (None, _) => {}
            }
        }
        if self.prompt_kinds.is_empty() {
            return Err(invalid("prompt_kinds must be non-empty"));
        }
        if self.max_parallel_requests == 0 {
            return Err(invalid("max_parallel_requests must be at least 1"));
        }
        if let Some(e) = &self.embedding {
            match e.source {
                EmbeddingSourceKind::Cache if e.cache.is_none() => {
                    return Err(invalid("embedding.source = \"cache\" needs embedding.cache"))
                }
                EmbeddingSourceKind::Provider if e.provider.is_none() => {
                    return Err(invalid("embedding.source = \"provider\" needs [embedding.provider]"))
                }
                EmbeddingSourceKind::Mock if e.dimension == 0 => return Err(invalid("embedding.dimension must be positive")),
                _ => {}
            }
            if e.window_tokens == 0 || e.window_step == 0 || e.window_step > e.window_tokens {
                return Err(invalid("embedding windows need 0 < window_step <= window_tokens"));
            }
        }
        if self.analysis.attributes.is_empty() {
            return Err(invalid("analysis.attributes must be non-empty"));
        }
        Ok(())
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat, ConfigError> {
        match &self.corpus_format {
            Some(f) => f.parse().map_err(invalid),
            None => CorpusFormat::from_path(&self.corpus)
                .ok_or_else(|| invalid(format!("cannot infer the format of {}", self.corpus.display()))),
        }
    }

    pub fn rules(&self) -> Result<Rules, ConfigError> {
        match &self.rules {
            Some(p) => Rules::load(&self.resolve(p)).map_err(|e| invalid(e.to_string())),
            None => Rules::from_toml_str(crate::extraction::DEFAULT_RULES_TOML).map_err(|e| invalid(e.to_string())),
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        match &self.templates {
            Some(dir) => TemplateSet::with_overrides(&self.resolve(dir)).map_err(|e| invalid(e.to_string())),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            cache_dir: self.gateway.cache.then(|| self.run_dir().join("cache")),
            retry: self.gateway.retry,
            max_in_flight: self.max_parallel_requests,
            requests_per_minute: self.gateway.requests_per_minute.clone(),
            timeout_secs: self.gateway.timeout_secs,
        }
    }

    /// The embedding source, loading the cache file if configured.
    pub fn embedding_source(&self) -> Result<Option<EmbeddingSource>, ConfigError> {
        let Some(e) = &self.embedding else {
            return Ok(None);
        };
        Ok(Some(match e.source {
            EmbeddingSourceKind::Mock => EmbeddingSource::SeededMock(SeededMock::new(e.dimension, self.seed)),
            EmbeddingSourceKind::Provider => EmbeddingSource::Provider(e.provider.clone().expect("validated")),
            EmbeddingSourceKind::Cache => {
                let path = self.resolve(e.cache.as_ref().expect("validated"));
                EmbeddingSource::Cache(EmbeddingCache::load(&path).map_err(|err| invalid(format!("{}: {err}", path.display())))?)
            }
        }))
    }

    pub fn sentence_pairs(&self) -> Result<SentencePairSet, ConfigError> {
        match self.embedding.as_ref().and_then(|e| e.pairs.as_ref()) {
            Some(p) => SentencePairSet::load(&self.resolve(p)).map_err(|e| invalid(e.to_string())),
            None => Ok(SentencePairSet::builtin().clone()),
        }
    }

    pub fn gender_words(&self) -> Result<std::collections::HashSet<String>, ConfigError> {
        match self.embedding.as_ref().and_then(|e| e.gender_words.as_ref()) {
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok(crate::embedbias::parse_word_list(&text))
            }
            None => Ok(crate::embedbias::default_gender_words()),
        }
    }
}

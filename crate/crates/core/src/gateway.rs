//! Provider-agnostic chat completion with caching, throttling and retries,
//! plus a seeded mock provider with planted per-group accuracy.
//!
//! Responses are cached on disk under `objects/<ab>/<key>.json`, where the
//! key hashes (provider, model id, prompt content hash, temperature); an
//! `index.jsonl` lists keys in write order. Objects are written to a
//! temporary file and renamed, so a crash never leaves a partial entry.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::demographics::{Ethnicity, EthnicityKey, Gender, GenderKey, GroupKey, Label};
use crate::exec::{derive_seed, sha256_hex};
use crate::prompting::{ChatPrompt, TemplateKind};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    OpenaiCompatible,
    AnthropicCompatible,
    GeminiCompatible,
    Mock,
}

impl Provider {
    pub fn as_str(self) -> &'static str {
        match self {
            Provider::OpenaiCompatible => "openai_compatible",
            Provider::AnthropicCompatible => "anthropic_compatible",
            Provider::GeminiCompatible => "gemini_compatible",
            Provider::Mock => "mock",
        }
    }

    /// Environment variable read for the API key unless overridden.
    pub fn default_key_env(self) -> Option<&'static str> {
        match self {
            Provider::OpenaiCompatible => Some("OPENAI_API_KEY"),
            Provider::AnthropicCompatible => Some("ANTHROPIC_API_KEY"),
            Provider::GeminiCompatible => Some("GEMINI_API_KEY"),
            Provider::Mock => None,
        }
    }

    /// Environment variable that may override the base URL.
    pub fn base_url_env(self) -> Option<&'static str> {
        match self {
            Provider::OpenaiCompatible => Some("OPENAI_BASE_URL"),
            Provider::AnthropicCompatible => Some("ANTHROPIC_BASE_URL"),
            Provider::GeminiCompatible => Some("GEMINI_BASE_URL"),
            Provider::Mock => None,
        }
    }

    pub fn default_base_url(self) -> &'static str {
        match self {
            Provider::OpenaiCompatible => "https://api.openai.com/v1",
            Provider::AnthropicCompatible => "https://api.anthropic.com",
            Provider::GeminiCompatible => "https://generativelanguage.googleapis.com",
            Provider::Mock => "",
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "openai" | "openai_compatible" => Ok(Provider::OpenaiCompatible),
            "anthropic" | "anthropic_compatible" => Ok(Provider::AnthropicCompatible),
            "gemini" | "gemini_compatible" => Ok(Provider::GeminiCompatible),
            "mock" => Ok(Provider::Mock),
            other => Err(format!("unknown provider `{other}`")),
        }
    }
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub provider: Provider,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Base URL override; otherwise the provider's environment variable or
    /// public endpoint.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// API key variable override.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Required for the mock provider.
    #[serde(default)]
    pub mock: Option<MockBiasProfile>,
}

impl ModelSpec {
    pub fn new(provider: Provider, model_id: &str) -> Self {
        ModelSpec {
            provider,
            model_id: model_id.to_string(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            endpoint: None,
            api_key_env: None,
            mock: None,
        }
    }

    pub fn mock(model_id: &str, profile: MockBiasProfile) -> Self {
        ModelSpec {
            mock: Some(profile),
            ..ModelSpec::new(Provider::Mock, model_id)
        }
    }

    fn base_url(&self) -> String {
        if let Some(e) = &self.endpoint {
            return e.trim_end_matches('/').to_string();
        }
        self.provider
            .base_url_env()
            .and_then(|v| std::env::var(v).ok())
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| self.provider.default_base_url().to_string())
            .trim_end_matches('/')
            .to_string()
    }

    fn api_key(&self, content_hash: &str) -> Result<Option<String>, GatewayError> {
        let var = match (&self.api_key_env, self.provider.default_key_env()) {
            (Some(v), _) => v.as_str(),
            (None, Some(v)) => v,
            (None, None) => return Ok(None),
        };
        match std::env::var(var) {
            Ok(k) if !k.is_empty() => Ok(Some(k)),
            _ => Err(GatewayError::Auth {
                content_hash: content_hash.to_string(),
                message: format!("{var} is not set"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("authentication failed for {content_hash}: {message}")]
    Auth { content_hash: String, message: String },
    #[error("rate limit still exceeded after retries for {content_hash}")]
    RateLimitExhausted { content_hash: String },
    #[error("transport error for {content_hash}: {message}")]
    Transport { content_hash: String, message: String },
    #[error("no planted accuracy for group {group} ({content_hash})")]
    UnknownGroup { content_hash: String, group: String },
    #[error("mock request for {content_hash} is missing {what}")]
    MockInput { content_hash: String, what: String },
}

impl GatewayError {
    pub fn content_hash(&self) -> &str {
        match self {
            GatewayError::Auth { content_hash, .. }
            | GatewayError::RateLimitExhausted { content_hash }
            | GatewayError::Transport { content_hash, .. }
            | GatewayError::UnknownGroup { content_hash, .. }
            | GatewayError::MockInput { content_hash, .. } => content_hash,
        }
    }
}

/// Variant metadata that only the mock provider reads.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestMeta {
    pub variant_id: String,
    pub gender: Option<Gender>,
    pub ethnicity: Option<Ethnicity>,
    pub gold: Option<Label>,
    pub options: Option<[String; 4]>,
}

// ---------------------------------------------------------------------------
// Mock provider

const BASE_LEXICON: &[&str] = &[
    "findings", "consistent", "history", "examination", "presentation", "diagnosis", "clinical", "likely",
    "supports", "symptoms", "management", "evidence", "typical", "features", "laboratory", "imaging",
    "treatment", "patient", "course", "suggests",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBiasProfile {
    /// Probability of answering with the gold label, by group. Lookup tries
    /// the exact group, then gender only, then ethnicity only, then `Any/Any`.
    pub accuracy_by_group: BTreeMap<GroupKey, f64>,
    /// Extra words mixed into explanations for a group.
    #[serde(default)]
    pub style_by_group: BTreeMap<GroupKey, Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

impl MockBiasProfile {
    pub fn uniform(accuracy: f64, seed: u64) -> Self {
        MockBiasProfile {
            accuracy_by_group: [(GroupKey::ANY, accuracy)].into(),
            style_by_group: BTreeMap::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (g, p) in &self.accuracy_by_group {
            if !(0.0..=1.0).contains(p) || p.is_nan() {
                return Err(format!("accuracy for {g} is {p}, outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn lookup<'a, T>(map: &'a BTreeMap<GroupKey, T>, gender: Gender, ethnicity: Option<Ethnicity>) -> Option<&'a T> {
        let exact = GroupKey::exact(gender, ethnicity);
        [
            exact,
            GroupKey {
                ethnicity: EthnicityKey::Any,
                ..exact
            },
            GroupKey {
                gender: GenderKey::Any,
                ..exact
            },
            GroupKey::ANY,
        ]
        .iter()
        .find_map(|k| map.get(k))
    }

    pub fn accuracy_for(&self, gender: Gender, ethnicity: Option<Ethnicity>) -> Option<f64> {
        Self::lookup(&self.accuracy_by_group, gender, ethnicity).copied()
    }

    fn fingerprint(&self) -> String {
        sha256_hex(&[&serde_json::to_string(self).expect("profile serialises")])
    }
}

/// The mock's response to a rendered prompt. The label is the gold option
/// with the group's planted probability and otherwise a uniformly chosen
/// wrong option; draws are seeded by the variant id and prompt kind.
pub fn mock_complete(profile: &MockBiasProfile, prompt: &ChatPrompt, meta: &RequestMeta) -> Result<String, GatewayError> {
    let missing = |what: &str| GatewayError::MockInput {
        content_hash: prompt.content_hash.clone(),
        what: what.to_string(),
    };
    let gender = meta.gender.ok_or_else(|| missing("gender"))?;
    let p = profile
        .accuracy_for(gender, meta.ethnicity)
        .ok_or_else(|| GatewayError::UnknownGroup {
            content_hash: prompt.content_hash.clone(),
            group: GroupKey::exact(gender, meta.ethnicity).to_string(),
        })?;
    let key = format!("{}|{}", meta.variant_id, prompt.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, &key));
    let correct = rng.random::<f64>() < p;
    let gold = meta.gold;
    let label = match gold {
        Some(g) if correct => g,
        Some(g) => {
            let wrong: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != g).collect();
            wrong[rng.random_range(0..wrong.len())]
        }
        None => Label::ALL[rng.random_range(0..4)],
    };
    let style = MockBiasProfile::lookup(&profile.style_by_group, gender, meta.ethnicity);
    let words: Vec<&str> = (0..12)
        .map(|_| match style {
            Some(s) if !s.is_empty() && rng.random::<bool>() => s[rng.random_range(0..s.len())].as_str(),
            _ => BASE_LEXICON[rng.random_range(0..BASE_LEXICON.len())],
        })
        .collect();
    let explanation = format!("The {}.", words.join(" "));
    Ok(match prompt.kind {
        TemplateKind::BiasRelevance => format!("{}\n{explanation}", rng.random_range(0..=5u8)),
        TemplateKind::FTXPL => explanation,
        TemplateKind::NoOptions => {
            let options = meta.options.as_ref().ok_or_else(|| missing("options"))?;
            format!("{}\n{explanation}", options[label.index()])
        }
        _ => {
            if gold.is_none() {
                return Err(missing("gold label"));
            }
            format!("{label}\n{explanation}")
        }
    })
}

// ---------------------------------------------------------------------------
// Disk cache

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub provider: Provider,
    pub model_id: String,
    pub content_hash: String,
    pub temperature: f64,
    pub text: String,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    index_lock: Mutex<()>,
    tmp_counter: AtomicU64,
}

pub fn cache_key(provider: Provider, model_id: &str, content_hash: &str, temperature: f64) -> String {
    sha256_hex(&[provider.as_str(), model_id, content_hash, &format!("{temperature:?}")])
}

impl ResponseCache {
    pub fn open(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root.join("objects"))?;
        Ok(ResponseCache {
            root: root.to_path_buf(),
            index_lock: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn object_path(&self, key: &str) -> PathBuf {
        self.root.join("objects").join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.object_path(key)).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(e) if e.key == key => Some(e),
            _ => {
                log::warn!("ignoring unreadable cache object {key}");
                None
            }
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let path = self.object_path(&entry.key);
        let dir = path.parent().expect("object has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            entry.key,
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, entry)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        let _guard = self.index_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut index = OpenOptions::new().create(true).append(true).open(self.root.join("index.jsonl"))?;
        let line = json!({
            "key": entry.key,
            "provider": entry.provider,
            "model_id": entry.model_id,
            "content_hash": entry.content_hash,
            "temperature": entry.temperature,
        });
        writeln!(index, "{line}")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Throttling

/// Token bucket refilled at `rate` tokens per second, holding at most
/// `capacity` tokens.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(requests_per_minute: f64) -> Self {
        let rate = requests_per_minute / 60.0;
        let capacity = rate.max(1.0);
        TokenBucket {
            rate,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base·2^attempt, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(30));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub cache_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    /// Maximum concurrent requests per provider.
    pub max_in_flight: usize,
    /// Requests per minute per provider; unlisted providers are unthrottled.
    pub requests_per_minute: BTreeMap<Provider, f64>,
    pub timeout_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            cache_dir: None,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            requests_per_minute: BTreeMap::new(),
            timeout_secs: 120,
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway

enum Failure {
    Retryable(String, bool),
    Fatal(GatewayError),
}

pub struct Gateway {
    config: GatewayConfig,
    cache: Option<ResponseCache>,
    buckets: HashMap<Provider, TokenBucket>,
    semaphores: HashMap<Provider, Semaphore>,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> std::io::Result<Self> {
        let cache = config.cache_dir.as_deref().map(ResponseCache::open).transpose()?;
        let buckets = config
            .requests_per_minute
            .iter()
            .map(|(p, rpm)| (*p, TokenBucket::per_minute(*rpm)))
            .collect();
        let semaphores = [
            Provider::OpenaiCompatible,
            Provider::AnthropicCompatible,
            Provider::GeminiCompatible,
            Provider::Mock,
        ]
        .into_iter()
        .map(|p| (p, Semaphore::new(config.max_in_flight)))
        .collect();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(std::io::Error::other)?;
        Ok(Gateway {
            config,
            cache,
            buckets,
            semaphores,
            client,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of provider invocations (cache hits excluded), including
    /// mock calls and retries.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn key_for(spec: &ModelSpec, prompt: &ChatPrompt, meta: &RequestMeta) -> String {
        match (&spec.mock, spec.provider) {
            // Mock output depends on the profile and the variant, not only on
            // the prompt text.
            (Some(profile), Provider::Mock) => {
                let model = format!("{}#{}#{}", spec.model_id, profile.fingerprint(), meta.variant_id);
                cache_key(spec.provider, &model, &prompt.content_hash, spec.temperature)
            }
            _ => cache_key(spec.provider, &spec.model_id, &prompt.content_hash, spec.temperature),
        }
    }

    pub fn complete(&self, spec: &ModelSpec, prompt: &ChatPrompt, meta: &RequestMeta) -> Result<RawResponse, GatewayError> {
        let key = Self::key_for(spec, prompt, meta);
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(RawResponse {
                text: entry.text,
                latency_ms: 0,
                token_usage: entry.token_usage,
                cached: true,
            });
        }
        let started = Instant::now();
        let (text, token_usage) = if spec.provider == Provider::Mock {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let profile = spec.mock.as_ref().ok_or_else(|| GatewayError::MockInput {
                content_hash: prompt.content_hash.clone(),
                what: "mock profile".into(),
            })?;
            (mock_complete(profile, prompt, meta)?, None)
        } else {
            self.remote(spec, prompt)?
        };
        let response = RawResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            token_usage,
            cached: false,
        };
        if let Some(cache) = &self.cache {
            let entry = CacheEntry {
                key,
                provider: spec.provider,
                model_id: spec.model_id.clone(),
                content_hash: prompt.content_hash.clone(),
                temperature: spec.temperature,
                text: response.text.clone(),
                token_usage: response.token_usage,
            };
            if let Err(e) = cache.put(&entry) {
                log::warn!("could not cache response {}: {e}", entry.key);
            }
        }
        Ok(response)
    }

    fn remote(&self, spec: &ModelSpec, prompt: &ChatPrompt) -> Result<(String, Option<TokenUsage>), GatewayError> {
        let hash = &prompt.content_hash;
        let key = spec.api_key(hash)?;
        let _permit = self.semaphores[&spec.provider].acquire();
        let mut attempt = 0;
        loop {
            if let Some(bucket) = self.buckets.get(&spec.provider) {
                bucket.acquire();
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.send(spec, prompt, key.as_deref()) {
                Ok(out) => return Ok(out),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message, rate_limited)) => {
                    if attempt >= self.config.retry.max_retries {
                        return Err(if rate_limited {
                            GatewayError::RateLimitExhausted {
                                content_hash: hash.clone(),
                            }
                        } else {
                            GatewayError::Transport {
                                content_hash: hash.clone(),
                                message,
                            }
                        });
                    }
                    let delay = self.config.retry.delay(attempt);
                    log::debug!("retrying {hash} in {delay:?}: {message}");
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn send(&self, spec: &ModelSpec, prompt: &ChatPrompt, key: Option<&str>) -> Result<(String, Option<TokenUsage>), Failure> {
        let base = spec.base_url();
        let request = match spec.provider {
            Provider::OpenaiCompatible => {
                let body = json!({
                    "model": spec.model_id,
                    "messages": [
                        {"role": "system", "content": prompt.system},
                        {"role": "user", "content": prompt.user},
                    ],
                    "temperature": spec.temperature,
                    "max_tokens": spec.max_tokens,
                });
                let mut r = self.client.post(format!("{base}/chat/completions")).json(&body);
                if let Some(k) = key {
                    r = r.bearer_auth(k);
                }
                r
            }
            Provider::AnthropicCompatible => {
                let body = json!({
                    "model": spec.model_id,
                    "system": prompt.system,
                    "messages": [{"role": "user", "content": prompt.user}],
                    "temperature": spec.temperature,
                    "max_tokens": spec.max_tokens,
                });
                let mut r = self
                    .client
                    .post(format!("{base}/v1/messages"))
                    .header("anthropic-version", "2023-06-01")
                    .json(&body);
                if let Some(k) = key {
                    r = r.header("x-api-key", k);
                }
                r
            }
            Provider::GeminiCompatible => {
                let body = json!({
                    "systemInstruction": {"parts": [{"text": prompt.system}]},
                    "contents": [{"role": "user", "parts": [{"text": prompt.user}]}],
                    "generationConfig": {"temperature": spec.temperature, "maxOutputTokens": spec.max_tokens},
                });
                let mut r = self
                    .client
                    .post(format!("{base}/v1beta/models/{}:generateContent", spec.model_id))
                    .json(&body);
                if let Some(k) = key {
                    r = r.header("x-goog-api-key", k);
                }
                r
            }
            Provider::Mock => unreachable!("mock requests never reach the network"),
        };
        let hash = &prompt.content_hash;
        let resp = request.send().map_err(|e| Failure::Retryable(e.to_string(), false))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Failure::Fatal(GatewayError::Auth {
                content_hash: hash.clone(),
                message: format!("HTTP {status}"),
            }));
        }
        if status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}"), true));
        }
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}"), false));
        }
        let body: Value = resp.json().map_err(|e| Failure::Retryable(e.to_string(), false))?;
        if !status.is_success() {
            return Err(Failure::Fatal(GatewayError::Transport {
                content_hash: hash.clone(),
                message: format!("HTTP {status}: {body}"),
            }));
        }
        extract_completion(spec.provider, &body).ok_or_else(|| {
            Failure::Fatal(GatewayError::Transport {
                content_hash: hash.clone(),
                message: format!("unexpected response shape: {body}"),
            })
        })
    }
}

fn count(v: &Value) -> u64 {
    v.as_u64().unwrap_or(0)
}

/// Pulls the completion text and usage out of a provider response body.
pub fn extract_completion(provider: Provider, body: &Value) -> Option<(String, Option<TokenUsage>)> {
    match provider {
        Provider::OpenaiCompatible => {
            let text = body["choices"][0]["message"]["content"].as_str().unwrap_or("").to_string();
            body["choices"].get(0)?;
            let usage = body.get("usage").map(|u| TokenUsage {
                prompt_tokens: count(&u["prompt_tokens"]),
                completion_tokens: count(&u["completion_tokens"]),
            });
            Some((text, usage))
        }
        Provider::AnthropicCompatible => {
            let parts = body["content"].as_array()?;
            let text = parts
                .iter()
                .filter(|p| p["type"] == "text")
                .filter_map(|p| p["text"].as_str())
                .collect::<String>();
            let usage = body.get("usage").map(|u| TokenUsage {
                prompt_tokens: count(&u["input_tokens"]),
                completion_tokens: count(&u["output_tokens"]),
            });
            Some((text, usage))
        }
        Provider::GeminiCompatible => {
            let parts = body["candidates"][0]["content"]["parts"].as_array();
            body["candidates"].get(0)?;
            let text = parts
                .map(|ps| ps.iter().filter_map(|p| p["text"].as_str()).collect::<String>())
                .unwrap_or_default();
            let usage = body.get("usageMetadata").map(|u| TokenUsage {
                prompt_tokens: count(&u["promptTokenCount"]),
                completion_tokens: count(&u["candidatesTokenCount"]),
            });
            Some((text, usage))
        }
        Provider::Mock => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::parse_mcq;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::Arc;

    fn prompt(kind: TemplateKind, user: &str) -> ChatPrompt {
        ChatPrompt::new(kind, "system".into(), user.into())
    }

    fn meta(id: &str, gender: Gender) -> RequestMeta {
        RequestMeta {
            variant_id: id.into(),
            gender: Some(gender),
            ethnicity: None,
            gold: Some(Label::B),
            options: Some(["w".into(), "x".into(), "y".into(), "z".into()]),
        }
    }

    fn profile(male: f64, female: f64) -> MockBiasProfile {
        MockBiasProfile {
            accuracy_by_group: [(GroupKey::gender(Gender::Male), male), (GroupKey::gender(Gender::Female), female)].into(),
            style_by_group: BTreeMap::new(),
            seed: 3,
        }
    }

    #[test]
    fn mock_planted_accuracy() {
        let prof = profile(1.0, 0.0);
        for i in 0..50 {
            let p = prompt(TemplateKind::Q, &format!("case {i}"));
            let m = mock_complete(&prof, &p, &meta(&format!("v{i}"), Gender::Male)).unwrap();
            assert_eq!(parse_mcq(&m).label, Some(Label::B));
            let f = mock_complete(&prof, &p, &meta(&format!("v{i}"), Gender::Female)).unwrap();
            assert_ne!(parse_mcq(&f).label, Some(Label::B));
            assert!(parse_mcq(&f).label.is_some());
        }
        let n = 2000;
        let prof = profile(0.6, 0.5);
        let hits = |g: Gender| {
            (0..n)
                .filter(|i| {
                    let t = mock_complete(&prof, &prompt(TemplateKind::Q, "c"), &meta(&format!("v{i}"), g)).unwrap();
                    parse_mcq(&t).label == Some(Label::B)
                })
                .count() as f64
                / n as f64
        };
        let half_width = |p: f64| 2.5758293035489 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits(Gender::Male) - 0.6).abs() < half_width(0.6));
        assert!((hits(Gender::Female) - 0.5).abs() < half_width(0.5));
    }

    #[test]
    fn mock_lookup_order_and_errors() {
        let mut prof = MockBiasProfile::uniform(0.5, 1);
        prof.accuracy_by_group.insert(GroupKey::ethnicity(Some(Ethnicity::Black)), 0.2);
        prof.accuracy_by_group.insert(GroupKey::gender(Gender::Male), 0.7);
        prof.accuracy_by_group.insert(GroupKey::exact(Gender::Male, Some(Ethnicity::Black)), 0.9);
        assert_eq!(prof.accuracy_for(Gender::Male, Some(Ethnicity::Black)), Some(0.9));
        assert_eq!(prof.accuracy_for(Gender::Male, Some(Ethnicity::Asian)), Some(0.7));
        assert_eq!(prof.accuracy_for(Gender::Female, Some(Ethnicity::Black)), Some(0.2));
        assert_eq!(prof.accuracy_for(Gender::Female, None), Some(0.5));
        let only_male = profile(0.5, 0.5);
        let err = mock_complete(&only_male, &prompt(TemplateKind::Q, "c"), &meta("v", Gender::Neutral)).unwrap_err();
        assert!(matches!(err, GatewayError::UnknownGroup { .. }));
        assert!(MockBiasProfile::uniform(1.5, 0).validate().is_err());
    }

    #[test]
    fn mock_formats_follow_prompt_kind() {
        let prof = MockBiasProfile::uniform(1.0, 0);
        let m = meta("v1", Gender::Female);
        let no_opt = mock_complete(&prof, &prompt(TemplateKind::NoOptions, "c"), &m).unwrap();
        assert!(no_opt.starts_with("x\n"));
        let rating = mock_complete(&prof, &prompt(TemplateKind::BiasRelevance, "c"), &m).unwrap();
        assert!(crate::parsing::parse_rating(&rating).is_ok());
        let styled = MockBiasProfile {
            style_by_group: [(GroupKey::gender(Gender::Female), vec!["emotional".to_string()])].into(),
            ..prof.clone()
        };
        let text = mock_complete(&styled, &prompt(TemplateKind::Q, "c"), &m).unwrap();
        assert!(text.contains("emotional"));
        assert_eq!(text, mock_complete(&styled, &prompt(TemplateKind::Q, "c"), &m).unwrap());
    }

    #[test]
    fn profile_deserialises_from_group_strings() {
        let prof: MockBiasProfile =
            toml::from_str("seed = 4\n[accuracy_by_group]\nMale = 0.6\n\"Female/Black\" = 0.5\nAny = 0.4\n").unwrap();
        assert_eq!(prof.accuracy_for(Gender::Male, None), Some(0.6));
        assert_eq!(prof.accuracy_for(Gender::Female, Some(Ethnicity::Black)), Some(0.5));
        assert_eq!(prof.accuracy_for(Gender::Neutral, None), Some(0.4));
    }

    #[test]
    fn cache_hits_are_byte_identical_and_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        };
        let spec = ModelSpec::mock("mock-1", MockBiasProfile::uniform(0.5, 9));
        let p = prompt(TemplateKind::Q, "case");
        let m = meta("v", Gender::Male);
        let gw = Gateway::new(cfg.clone()).unwrap();
        let first = gw.complete(&spec, &p, &m).unwrap();
        let second = gw.complete(&spec, &p, &m).unwrap();
        assert!(!first.cached && second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(gw.provider_calls(), 1);
        let gw2 = Gateway::new(cfg).unwrap();
        let third = gw2.complete(&spec, &p, &m).unwrap();
        assert!(third.cached);
        assert_eq!(third.text, first.text);
        assert_eq!(gw2.provider_calls(), 0);
        let index = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 1);
    }

    #[test]
    fn cache_key_separates_temperature() {
        assert_ne!(
            cache_key(Provider::OpenaiCompatible, "m", "h", 0.0),
            cache_key(Provider::OpenaiCompatible, "m", "h", 0.7)
        );
    }

    /// Minimal HTTP server: answers each request with the next canned
    /// (status, body) pair and returns the raw requests it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut body_in = vec![0u8; len];
                reader.read_exact(&mut body_in).unwrap();
                seen.push(head + &String::from_utf8(body_in).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (addr, handle)
    }

    fn fast_retry() -> GatewayConfig {
        GatewayConfig {
            retry: RetryPolicy {
                max_retries: 2,
                base_delay_ms: 1,
                max_delay_ms: 2,
            },
            ..GatewayConfig::default()
        }
    }

    fn spec(provider: Provider, addr: &str, key_env: &str) -> ModelSpec {
        ModelSpec {
            endpoint: Some(addr.to_string()),
            api_key_env: Some(key_env.to_string()),
            ..ModelSpec::new(provider, "m1")
        }
    }

    #[test]
    fn openai_wire_format_with_retry() {
        std::env::set_var("CPVAUDIT_TEST_KEY_OPENAI", "sk-test");
        let ok = r#"{"choices":[{"message":{"content":"B\nBecause."}}],"usage":{"prompt_tokens":10,"completion_tokens":3}}"#;
        let (addr, h) = serve(vec![(500, "{}".into()), (200, ok.into())]);
        let gw = Gateway::new(fast_retry()).unwrap();
        let r = gw
            .complete(&spec(Provider::OpenaiCompatible, &addr, "CPVAUDIT_TEST_KEY_OPENAI"), &prompt(TemplateKind::Q, "hello"), &RequestMeta::default())
            .unwrap();
        assert_eq!(r.text, "B\nBecause.");
        assert_eq!(r.token_usage, Some(TokenUsage { prompt_tokens: 10, completion_tokens: 3 }));
        assert_eq!(gw.provider_calls(), 2);
        let seen = h.join().unwrap();
        let req = &seen[1];
        assert!(req.starts_with("POST /chat/completions"));
        assert!(req.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        let body: Value = serde_json::from_str(&req[req.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
    }

    #[test]
    fn anthropic_and_gemini_wire_formats() {
        std::env::set_var("CPVAUDIT_TEST_KEY_OTHER", "k2");
        let a = r#"{"content":[{"type":"text","text":"C\nok"}],"usage":{"input_tokens":5,"output_tokens":2}}"#;
        let g = r#"{"candidates":[{"content":{"parts":[{"text":"D\n"},{"text":"fine"}]}}]}"#;
        let (addr, h) = serve(vec![(200, a.into()), (200, g.into())]);
        let gw = Gateway::new(fast_retry()).unwrap();
        let p = prompt(TemplateKind::Q, "u");
        let ra = gw.complete(&spec(Provider::AnthropicCompatible, &addr, "CPVAUDIT_TEST_KEY_OTHER"), &p, &RequestMeta::default()).unwrap();
        let rg = gw.complete(&spec(Provider::GeminiCompatible, &addr, "CPVAUDIT_TEST_KEY_OTHER"), &p, &RequestMeta::default()).unwrap();
        assert_eq!((ra.text.as_str(), rg.text.as_str()), ("C\nok", "D\nfine"));
        let seen = h.join().unwrap();
        assert!(seen[0].starts_with("POST /v1/messages"));
        assert!(seen[0].contains("x-api-key: k2") && seen[0].contains("anthropic-version: 2023-06-01"));
        assert!(seen[0].contains(r#""system":"system""#));
        assert!(seen[1].starts_with("POST /v1beta/models/m1:generateContent"));
        assert!(seen[1].contains("systemInstruction") && seen[1].contains("maxOutputTokens"));
    }

    #[test]
    fn failure_paths() {
        std::env::set_var("CPVAUDIT_TEST_KEY_FAIL", "k");
        let p = prompt(TemplateKind::Q, "u");
        // Nothing listens on this port once the listener is dropped.
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            format!("http://{}", l.local_addr().unwrap())
        };
        let gw = Gateway::new(fast_retry()).unwrap();
        let err = gw.complete(&spec(Provider::OpenaiCompatible, &addr, "CPVAUDIT_TEST_KEY_FAIL"), &p, &RequestMeta::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { .. }));
        assert_eq!(err.content_hash(), p.content_hash);
        assert_eq!(gw.provider_calls(), 3);

        let (addr, h) = serve(vec![(429, "{}".into()), (429, "{}".into()), (429, "{}".into()), (401, "{}".into())]);
        let s = spec(Provider::OpenaiCompatible, &addr, "CPVAUDIT_TEST_KEY_FAIL");
        assert!(matches!(gw.complete(&s, &p, &RequestMeta::default()), Err(GatewayError::RateLimitExhausted { .. })));
        assert!(matches!(gw.complete(&s, &p, &RequestMeta::default()), Err(GatewayError::Auth { .. })));
        h.join().unwrap();

        let missing = spec(Provider::OpenaiCompatible, &addr, "CPVAUDIT_TEST_KEY_UNSET");
        assert!(matches!(gw.complete(&missing, &p, &RequestMeta::default()), Err(GatewayError::Auth { .. })));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (sem, active, peak) = (sem.clone(), active.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn token_bucket_throttles() {
        let bucket = TokenBucket::per_minute(600.0); // 10 per second, burst 10
        let start = Instant::now();
        for _ in 0..12 {
            bucket.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(150));
        let policy = RetryPolicy::default();
        assert_eq!(policy.delay(0), Duration::from_millis(500));
        assert_eq!(policy.delay(2), Duration::from_millis(2000));
        assert_eq!(policy.delay(20), Duration::from_millis(30_000));
    }
}

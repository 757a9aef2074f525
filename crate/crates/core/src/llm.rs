//! Chat-completion client with a scripted mock backend, an append-only
//! response cache, bounded retries and label extraction.
//!
//! The wire format is the common JSON chat-completion shape: the whole prompt
//! goes out as a single user message and the first choice's message content
//! is the completion.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::RenderedPrompt;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempts (last status {}): {message}", fmt_status(*.last_status))]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("authentication rejected with status {status}")]
    Auth { status: u16 },
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("no scripted mock response for requirement {0}")]
    NoScriptedResponse(String),
    #[error("invalid model config for {model_id}: {message}")]
    InvalidConfig { model_id: String, message: String },
    #[error("mock script {path}: {message}")]
    MockScript { path: PathBuf, message: String },
    #[error("response cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty completion")]
    EmptyCompletion,
}

fn fmt_status(status: Option<u16>) -> String {
    status.map_or_else(|| "none".to_string(), |s| s.to_string())
}

impl LlmError {
    /// Transport exhaustion as opposed to a configuration or protocol problem.
    pub fn is_transport(&self) -> bool {
        matches!(self, LlmError::Exhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Live,
    Mock,
}

fn default_max_output_tokens() -> u32 {
    16
}
fn default_timeout() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    1000
}

/// Model connection settings. The API key itself is never stored, only the
/// name of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    #[serde(default)]
    pub backend: BackendMode,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First backoff delay; later delays double and carry up to 25% jitter.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
}

impl ModelConfig {
    pub fn mock(model_id: &str) -> Self {
        ModelConfig {
            model_id: model_id.to_string(),
            backend: BackendMode::Mock,
            endpoint_url: None,
            api_key_env: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            request_timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            mock_script: None,
        }
    }

    pub fn live(model_id: &str, endpoint_url: &str) -> Self {
        ModelConfig {
            backend: BackendMode::Live,
            endpoint_url: Some(endpoint_url.to_string()),
            ..Self::mock(model_id)
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let invalid = |message: &str| LlmError::InvalidConfig {
            model_id: self.model_id.clone(),
            message: message.to_string(),
        };
        if self.model_id.trim().is_empty() {
            return Err(invalid("model_id must not be empty"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(invalid("temperature must be >= 0"));
        }
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return Err(invalid("request_timeout_secs must be > 0"));
        }
        if self.backend == BackendMode::Live && self.endpoint_url.is_none() {
            return Err(invalid("live backend needs endpoint_url"));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.retry_base_ms as f64 * 2f64.powi(retry.saturating_sub(1) as i32);
        let jitter = 1.0 + 0.25 * rand::random::<f64>();
        Duration::from_secs_f64(base * jitter / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub raw_text: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
    pub attempt_count: u32,
}

/// Stable fingerprint of (model_id, temperature, prompt text).
pub fn cache_key(config: &ModelConfig, prompt: &RenderedPrompt) -> String {
    fingerprint(config, prompt, None)
}

/// As [`cache_key`], with the run index mixed in so that repeated runs never
/// share a cached answer.
pub fn cache_key_for_run(config: &ModelConfig, prompt: &RenderedPrompt, run_index: usize) -> String {
    fingerprint(config, prompt, Some(run_index))
}

fn fingerprint(config: &ModelConfig, prompt: &RenderedPrompt, run_index: Option<usize>) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(b"reqqda-completion-v1");
    field(config.model_id.as_bytes());
    field(&config.temperature.to_bits().to_le_bytes());
    field(prompt.text.as_bytes());
    if let Some(run) = run_index {
        field(&(run as u64).to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Pulls a single label out of a raw completion: first non-empty line, with
/// quotes, markdown emphasis, trailing periods and a leading `Label:` removed.
pub fn extract_label(raw_text: &str) -> Result<String, LlmError> {
    const WRAPPERS: &[char] = &['"', '\'', '`', '*', '_', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}'];
    let line = raw_text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or(LlmError::EmptyCompletion)?;
    let mut label = line;
    loop {
        let before = label;
        label = label.trim().trim_matches(WRAPPERS).trim_end_matches('.').trim();
        if label.get(..6).is_some_and(|p| p.eq_ignore_ascii_case("label:")) {
            label = &label[6..];
        }
        if label == before {
            break;
        }
    }
    if label.is_empty() {
        return Err(LlmError::EmptyCompletion);
    }
    Ok(label.to_string())
}

/// Canned responses for offline runs.
///
/// Lookup order: per-run override by requirement id, then `responses` by
/// prompt fingerprint, then `responses` by requirement id, then
/// `default_response`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub default_response: Option<String>,
    /// Run index (as a string key) -> requirement id -> response.
    #[serde(default)]
    pub runs: BTreeMap<String, BTreeMap<String, String>>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::MockScript {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let script: MockScript = toml::from_str(&text).map_err(|e| LlmError::MockScript {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for key in script.runs.keys() {
            if key.parse::<usize>().is_err() {
                return Err(LlmError::MockScript {
                    path: path.to_path_buf(),
                    message: format!("run key {key:?} is not a run index"),
                });
            }
        }
        Ok(script)
    }

    pub fn lookup(&self, prompt: &RenderedPrompt, fingerprint: &str, run_index: usize) -> Option<&str> {
        self.runs
            .get(&run_index.to_string())
            .and_then(|m| m.get(&prompt.requirement_id))
            .or_else(|| self.responses.get(fingerprint))
            .or_else(|| self.responses.get(&prompt.requirement_id))
            .or(self.default_response.as_ref())
            .map(String::as_str)
    }
}

/// Outcome of a single attempt.
#[derive(Debug)]
pub enum AttemptError {
    /// Worth retrying: rate limits, server errors, timeouts, connection loss.
    Transient { status: Option<u16>, message: String },
    Fatal(LlmError),
}

/// Something that turns a prompt into raw completion text.
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, config: &ModelConfig, prompt: &RenderedPrompt, run_index: usize) -> Result<String, AttemptError>;
}

pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, config: &ModelConfig, prompt: &RenderedPrompt, run_index: usize) -> Result<String, AttemptError> {
        self.script
            .lookup(prompt, &cache_key(config, prompt), run_index)
            .map(str::to_string)
            .ok_or_else(|| AttemptError::Fatal(LlmError::NoScriptedResponse(prompt.requirement_id.clone())))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: Option<ChatResponseMessage>,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// Blocking HTTP backend speaking the chat-completion protocol.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable, if any.
    pub fn from_config(config: &ModelConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidConfig {
                model_id: config.model_id.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            client,
            endpoint: config.endpoint_url.clone().unwrap_or_default(),
            api_key,
        })
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn send(&self, config: &ModelConfig, prompt: &RenderedPrompt, _run_index: usize) -> Result<String, AttemptError> {
        let body = ChatRequest {
            model: &config.model_id,
            messages: [ChatMessage {
                role: "user",
                content: &prompt.text,
            }],
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        };
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| AttemptError::Transient {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(AttemptError::Fatal(LlmError::Auth { status })),
            408 | 409 | 425 | 429 | 500..=599 => {
                return Err(AttemptError::Transient {
                    status: Some(status),
                    message: response.text().unwrap_or_default(),
                })
            }
            _ => {
                return Err(AttemptError::Fatal(LlmError::Rejected {
                    status,
                    message: response.text().unwrap_or_default(),
                }))
            }
        }
        let text = response.text().map_err(|e| AttemptError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            return Err(AttemptError::Fatal(LlmError::Protocol("empty response body".into())));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(LlmError::Protocol(format!("malformed response: {e}"))))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .and_then(|m| m.content)
            .ok_or_else(|| AttemptError::Fatal(LlmError::Protocol("response has no message content".into())))?;
        if content.trim().is_empty() {
            return Err(AttemptError::Fatal(LlmError::Protocol("empty completion content".into())));
        }
        Ok(content)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    raw_text: String,
}

/// Append-only on-disk map from fingerprint to raw completion text. Writes
/// are serialized through an internal lock.
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, String>>,
    file: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let io_err = |source| LlmError::Cache {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for line in reader.lines() {
                let line = line.map_err(io_err)?;
                // a torn final line from an interrupted write is skipped
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.raw_text);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        Ok(ResponseCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: &str, raw_text: &str) -> Result<(), LlmError> {
        let mut line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            raw_text: raw_text.to_string(),
        })
        .expect("cache line serializes");
        line.push('\n');
        {
            let mut file = self.file.lock().expect("cache lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| LlmError::Cache {
                    path: self.path.clone(),
                    source,
                })?;
        }
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), raw_text.to_string());
        Ok(())
    }
}

/// A model endpoint plus optional cache. Safe to share across threads.
pub struct LlmClient {
    config: ModelConfig,
    backend: Box<dyn Backend>,
    cache: Option<std::sync::Arc<ResponseCache>>,
    sleep: fn(Duration),
}

impl LlmClient {
    pub fn new(config: ModelConfig, backend: Box<dyn Backend>) -> Self {
        LlmClient {
            config,
            backend,
            cache: None,
            sleep: std::thread::sleep,
        }
    }

    /// Builds the backend named by `config.backend`. Mock configs need a
    /// `mock_script` path.
    pub fn from_config(config: ModelConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let backend: Box<dyn Backend> = match config.backend {
            BackendMode::Live => Box::new(HttpBackend::from_config(&config)?),
            BackendMode::Mock => {
                let path = config.mock_script.clone().ok_or_else(|| LlmError::InvalidConfig {
                    model_id: config.model_id.clone(),
                    message: "mock backend needs mock_script".into(),
                })?;
                Box::new(MockBackend::new(MockScript::load(&path)?))
            }
        };
        Ok(Self::new(config, backend))
    }

    pub fn with_cache(mut self, cache: std::sync::Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Replaces the backoff sleep, e.g. to skip waiting in tests.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<CompletionResult, LlmError> {
        self.complete_run(prompt, 0, false)
    }

    /// Completes `prompt` for a given run. With `per_run_key` the cache key
    /// includes the run index.
    pub fn complete_run(
        &self,
        prompt: &RenderedPrompt,
        run_index: usize,
        per_run_key: bool,
    ) -> Result<CompletionResult, LlmError> {
        let started = Instant::now();
        let key = if per_run_key {
            cache_key_for_run(&self.config, prompt, run_index)
        } else {
            cache_key(&self.config, prompt)
        };
        if let Some(raw_text) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(CompletionResult {
                raw_text,
                latency_ms: started.elapsed().as_millis() as u64,
                backend: BackendKind::Cache,
                attempt_count: 0,
            });
        }

        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.backend.send(&self.config, prompt, run_index) {
                Ok(raw_text) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &raw_text)?;
                    }
                    return Ok(CompletionResult {
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: self.backend.kind(),
                        attempt_count: attempts,
                    });
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient { status, message }) => {
                    if attempts > self.config.max_retries {
                        return Err(LlmError::Exhausted {
                            attempts,
                            last_status: status,
                            message,
                        });
                    }
                    log::warn!(
                        "{}: attempt {attempts} for {} failed ({}), retrying",
                        self.config.model_id,
                        prompt.requirement_id,
                        fmt_status(status)
                    );
                    (self.sleep)(self.config.backoff(attempts));
                }
            }
        }
    }
}

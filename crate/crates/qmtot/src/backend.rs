//! Uniform chat-completion interface over remote LLM services plus a
//! deterministic scripted backend and a content-addressed response cache.
//!
//! Two wire dialects are spoken: OpenAI-style `POST {base}/v1/chat/completions`
//! and Ollama-style `POST {base}/api/chat`. The scripted backend resolves
//! responses from a fixture file by (scope, purpose, per-purpose call counter)
//! and fails loudly on unmatched lookups.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("auth error: {0}")]
    Auth(String),
    #[error("scripted backend: {0}")]
    Script(String),
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// What pipeline stage a request serves. Excluded from the cache key so
/// identical calls replay across stages; used by the scripted backend to
/// resolve fixture entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Decompose,
    Extend,
    Validate,
    Readout,
    Score,
    Judge,
    Reflect,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub purpose: Purpose,
    /// Resolution scope for the scripted backend (the question id in
    /// pipeline runs). Excluded from the cache key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::Protocol("messages empty".to_string()));
        }
        if self.messages[0].role == MessageRole::Assistant {
            return Err(BackendError::Protocol(
                "first message role must be system or user".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    Ollama,
    Scripted,
}

/// Points at one serving endpoint (or a scripted fixture file).
///
/// For `scripted`, `base_url` is reused as the fixture file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRef {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

impl BackendRef {
    pub fn scripted(fixture_path: impl Into<String>) -> Self {
        BackendRef {
            kind: BackendKind::Scripted,
            base_url: fixture_path.into(),
            model: "scripted".to_string(),
            auth_env: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind != BackendKind::Scripted && reqwest::Url::parse(&self.base_url).is_err() {
            return Err(BackendError::Protocol(format!(
                "malformed base_url: {}",
                self.base_url
            )));
        }
        Ok(())
    }
}

/// 256-bit digest over the canonical serialization of the fields that
/// determine a completion: (kind, model, messages, temperature,
/// max_tokens, seed). `purpose` and `scope` are excluded so replays
/// across pipeline stages reuse identical calls.
pub fn cache_key(backend: &BackendRef, req: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        kind: BackendKind,
        model: &'a str,
        messages: &'a [ChatMessage],
        temperature: f64,
        max_tokens: u32,
        seed: Option<u64>,
    }
    let canonical = Canonical {
        kind: backend.kind,
        model: &req.model,
        messages: &req.messages,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
        seed: req.seed,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical serialization");
    hex::encode(Sha256::digest(bytes))
}

/// One scripted response: resolved by (scope, purpose, per-purpose counter).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub scope: Option<String>,
    pub purpose: Purpose,
    pub index: usize,
    pub text: String,
}

/// Authoring helper for scripted fixtures: appends entries with
/// auto-incrementing per-(scope, purpose) indices.
#[derive(Debug, Default)]
pub struct ScriptBuilder {
    entries: Vec<ScriptEntry>,
    counters: HashMap<(String, Purpose), usize>,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, scope: &str, purpose: Purpose, text: &str) {
        let counter = self
            .counters
            .entry((scope.to_string(), purpose))
            .or_insert(0);
        self.entries.push(ScriptEntry {
            scope: (!scope.is_empty()).then(|| scope.to_string()),
            purpose,
            index: *counter,
            text: text.to_string(),
        });
        *counter += 1;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("serialize fixture")
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }
}

struct ScriptSet {
    responses: HashMap<(String, Purpose, usize), String>,
    counters: Mutex<HashMap<(String, Purpose), usize>>,
}

impl ScriptSet {
    fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("fixture {}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Script(format!("fixture {}: {e}", path.display())))?;
        let mut responses = HashMap::new();
        for entry in entries {
            let scope = entry.scope.unwrap_or_default();
            let key = (scope, entry.purpose, entry.index);
            if responses.insert(key.clone(), entry.text).is_some() {
                return Err(BackendError::Script(format!(
                    "duplicate fixture entry {key:?}"
                )));
            }
        }
        Ok(ScriptSet {
            responses,
            counters: Mutex::new(HashMap::new()),
        })
    }

    fn next(&self, scope: &str, purpose: Purpose) -> Result<String, BackendError> {
        let mut counters = self.counters.lock().unwrap();
        let counter = counters.entry((scope.to_string(), purpose)).or_insert(0);
        let index = *counter;
        let key = (scope.to_string(), purpose, index);
        match self.responses.get(&key) {
            Some(text) => {
                *counter += 1;
                Ok(text.clone())
            }
            None => Err(BackendError::Script(format!(
                "no fixture entry for scope={scope:?} purpose={purpose:?} index={index}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
        }
    }
}

/// Counting semaphore bounding in-flight remote requests.
struct Limiter {
    max: usize,
    state: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            state: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut inflight = self.state.lock().unwrap();
        while *inflight >= self.max {
            inflight = self.cv.wait(inflight).unwrap();
        }
        *inflight += 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut inflight = self.limiter.state.lock().unwrap();
        *inflight -= 1;
        self.limiter.cv.notify_one();
    }
}

/// Shared transport: HTTP client, retry policy, response cache, and loaded
/// scripted fixtures. Safe for concurrent use.
pub struct Backend {
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    cache_dir: Option<PathBuf>,
    scripts: Mutex<HashMap<PathBuf, &'static ScriptSet>>,
    limiter: Limiter,
}

impl Backend {
    pub fn new(retry: RetryPolicy, cache_dir: Option<PathBuf>, max_inflight: usize) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client");
        Backend {
            http,
            retry,
            cache_dir,
            scripts: Mutex::new(HashMap::new()),
            limiter: Limiter::new(max_inflight),
        }
    }

    /// Backend with a custom HTTP timeout, for wire tests.
    pub fn with_timeout(
        retry: RetryPolicy,
        cache_dir: Option<PathBuf>,
        max_inflight: usize,
        timeout: Duration,
    ) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        Backend {
            http,
            retry,
            cache_dir,
            scripts: Mutex::new(HashMap::new()),
            limiter: Limiter::new(max_inflight),
        }
    }

    /// Sends one chat completion, consulting the response cache first and
    /// retrying transient failures (429/5xx/timeouts) with exponential
    /// backoff. Auth failures (401/403) are never retried.
    pub fn complete(
        &self,
        backend: &BackendRef,
        req: &ChatRequest,
    ) -> Result<ChatResponse, BackendError> {
        backend.validate()?;
        req.validate()?;

        if backend.kind == BackendKind::Scripted {
            return self.complete_scripted(backend, req);
        }

        let key = cache_key(backend, req);
        if let Some(hit) = self.cache_get(&key)? {
            return Ok(ChatResponse {
                cached: true,
                latency_ms: None,
                ..hit
            });
        }

        let _slot = self.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let started = Instant::now();
            match self.send_once(backend, req) {
                Ok(mut resp) => {
                    resp.latency_ms = Some(started.elapsed().as_millis() as u64);
                    self.cache_put(&key, &resp)?;
                    return Ok(resp);
                }
                Err(Retryable::No(err)) => return Err(err),
                Err(Retryable::Yes(err)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(err);
                    }
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1));
                    log::warn!(
                        "attempt {attempt}/{} failed ({err}); retrying in {delay}ms",
                        self.retry.max_attempts
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }

    fn complete_scripted(
        &self,
        backend: &BackendRef,
        req: &ChatRequest,
    ) -> Result<ChatResponse, BackendError> {
        let path = PathBuf::from(&backend.base_url);
        let script = {
            let mut scripts = self.scripts.lock().unwrap();
            match scripts.get(&path) {
                Some(s) => *s,
                None => {
                    // Leaked so counters stay shared for the process lifetime.
                    let loaded: &'static ScriptSet = Box::leak(Box::new(ScriptSet::load(&path)?));
                    scripts.insert(path.clone(), loaded);
                    loaded
                }
            }
        };
        let scope = req.scope.as_deref().unwrap_or("");
        let text = script.next(scope, req.purpose)?;
        Ok(ChatResponse {
            text,
            usage: TokenUsage::default(),
            cached: false,
            latency_ms: None,
        })
    }

    fn send_once(
        &self,
        backend: &BackendRef,
        req: &ChatRequest,
    ) -> Result<ChatResponse, Retryable> {
        let (url, body) = match backend.kind {
            BackendKind::OpenaiCompatible => (
                format!("{}/v1/chat/completions", backend.base_url.trim_end_matches('/')),
                openai_body(req),
            ),
            BackendKind::Ollama => (
                format!("{}/api/chat", backend.base_url.trim_end_matches('/')),
                ollama_body(req),
            ),
            BackendKind::Scripted => unreachable!("scripted handled earlier"),
        };

        let mut builder = self.http.post(&url).json(&body);
        if let Some(env_name) = &backend.auth_env {
            match std::env::var(env_name) {
                Ok(token) => builder = builder.bearer_auth(token),
                Err(_) => {
                    return Err(Retryable::No(BackendError::Auth(format!(
                        "env var {env_name} not set"
                    ))))
                }
            }
        }

        let response = builder.send().map_err(|e| {
            let err = BackendError::Transport(e.to_string());
            if e.is_timeout() || e.is_connect() || e.is_request() {
                Retryable::Yes(err)
            } else {
                Retryable::No(err)
            }
        })?;

        let status = response.status();
        if status == 401 || status == 403 {
            return Err(Retryable::No(BackendError::Auth(format!(
                "HTTP {status} from {url}"
            ))));
        }
        if status == 429 || status.is_server_error() {
            return Err(Retryable::Yes(BackendError::Transport(format!(
                "HTTP {status} from {url}"
            ))));
        }
        if !status.is_success() {
            return Err(Retryable::No(BackendError::Transport(format!(
                "HTTP {status} from {url}"
            ))));
        }

        let raw: serde_json::Value = response
            .json()
            .map_err(|e| Retryable::No(BackendError::Protocol(e.to_string())))?;
        parse_completion(backend.kind, &raw).map_err(Retryable::No)
    }

    fn cache_get(&self, key: &str) -> Result<Option<ChatResponse>, BackendError> {
        let Some(dir) = &self.cache_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{key}.json"));
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path)?;
        let resp: ChatResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Protocol(format!("corrupt cache entry {key}: {e}")))?;
        Ok(Some(resp))
    }

    fn cache_put(&self, key: &str, resp: &ChatResponse) -> Result<(), BackendError> {
        let Some(dir) = &self.cache_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        let stored = ChatResponse {
            cached: false,
            latency_ms: None,
            ..resp.clone()
        };
        // Write-then-rename so readers never see a partial entry; identical
        // keys carry identical values, so last-write-wins is safe.
        let tmp = dir.join(format!("{key}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&stored).expect("serialize response"))?;
        fs::rename(&tmp, dir.join(format!("{key}.json")))?;
        Ok(())
    }
}

enum Retryable {
    Yes(BackendError),
    No(BackendError),
}

fn openai_body(req: &ChatRequest) -> serde_json::Value {
    let messages: Vec<serde_json::Value> = req
        .messages
        .iter()
        .map(|m| {
            serde_json::json!({
                "role": role_str(m.role),
                "content": m.content,
            })
        })
        .collect();
    let mut body = serde_json::json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        body["seed"] = serde_json::json!(seed);
    }
    body
}

fn ollama_body(req: &ChatRequest) -> serde_json::Value {
    let messages: Vec<serde_json::Value> = req
        .messages
        .iter()
        .map(|m| {
            serde_json::json!({
                "role": role_str(m.role),
                "content": m.content,
            })
        })
        .collect();
    let mut options = serde_json::json!({
        "temperature": req.temperature,
        "num_predict": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        options["seed"] = serde_json::json!(seed);
    }
    serde_json::json!({
        "model": req.model,
        "messages": messages,
        "stream": false,
        "options": options,
    })
}

fn role_str(role: MessageRole) -> &'static str {
    match role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
    }
}

fn parse_completion(
    kind: BackendKind,
    raw: &serde_json::Value,
) -> Result<ChatResponse, BackendError> {
    match kind {
        BackendKind::OpenaiCompatible => {
            let text = raw["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| {
                    BackendError::Protocol("missing choices[0].message.content".to_string())
                })?
                .to_string();
            let usage = TokenUsage {
                prompt_tokens: raw["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                completion_tokens: raw["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            };
            Ok(ChatResponse {
                text,
                usage,
                cached: false,
                latency_ms: None,
            })
        }
        BackendKind::Ollama => {
            let text = raw["message"]["content"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol("missing message.content".to_string()))?
                .to_string();
            let usage = TokenUsage {
                prompt_tokens: raw["prompt_eval_count"].as_u64().unwrap_or(0),
                completion_tokens: raw["eval_count"].as_u64().unwrap_or(0),
            };
            Ok(ChatResponse {
                text,
                usage,
                cached: false,
                latency_ms: None,
            })
        }
        BackendKind::Scripted => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn request(purpose: Purpose) -> ChatRequest {
        ChatRequest {
            model: "m".to_string(),
            messages: vec![ChatMessage::system("sys"), ChatMessage::user("hi")],
            temperature: 0.0,
            max_tokens: 64,
            seed: Some(1),
            purpose,
            scope: None,
        }
    }

    #[test]
    fn cache_key_ignores_purpose_and_scope() {
        let backend = BackendRef::scripted("f.json");
        let a = request(Purpose::Score);
        let mut b = request(Purpose::Judge);
        b.scope = Some("q9".to_string());
        assert_eq!(cache_key(&backend, &a), cache_key(&backend, &b));
    }

    #[test]
    fn cache_key_covers_temperature() {
        let backend = BackendRef::scripted("f.json");
        let a = request(Purpose::Score);
        let mut b = request(Purpose::Score);
        b.temperature = 0.7;
        assert_ne!(cache_key(&backend, &a), cache_key(&backend, &b));
        assert_eq!(cache_key(&backend, &a), cache_key(&backend, &a));
    }

    #[test]
    fn scripted_backend_replays_fixture_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("fixture.json");
        let mut f = fs::File::create(&fixture).unwrap();
        write!(
            f,
            r#"[
                {{"purpose": "validate", "index": 0, "text": "STEP: check vitals"}},
                {{"purpose": "validate", "index": 1, "text": "second"}},
                {{"scope": "q2", "purpose": "validate", "index": 0, "text": "scoped"}}
            ]"#
        )
        .unwrap();
        let backend = Backend::new(RetryPolicy::default(), None, 4);
        let backend_ref = BackendRef::scripted(fixture.to_string_lossy());

        let r1 = backend.complete(&backend_ref, &request(Purpose::Validate)).unwrap();
        assert_eq!(r1.text, "STEP: check vitals");
        let r2 = backend.complete(&backend_ref, &request(Purpose::Validate)).unwrap();
        assert_eq!(r2.text, "second");

        let mut scoped = request(Purpose::Validate);
        scoped.scope = Some("q2".to_string());
        let r3 = backend.complete(&backend_ref, &scoped).unwrap();
        assert_eq!(r3.text, "scoped");

        // exhausted: unmatched lookups are errors, never silent defaults
        let err = backend.complete(&backend_ref, &request(Purpose::Validate));
        assert!(matches!(err, Err(BackendError::Script(_))));
    }

    #[test]
    fn invalid_requests_rejected() {
        let req = ChatRequest {
            messages: vec![],
            ..request(Purpose::Cot)
        };
        assert!(req.validate().is_err());
        let req = ChatRequest {
            messages: vec![ChatMessage {
                role: MessageRole::Assistant,
                content: "x".to_string(),
            }],
            ..request(Purpose::Cot)
        };
        assert!(req.validate().is_err());
    }

    #[test]
    fn remote_ref_requires_wellformed_url() {
        let bad = BackendRef {
            kind: BackendKind::Ollama,
            base_url: "not a url".to_string(),
            model: "m".to_string(),
            auth_env: None,
        };
        assert!(bad.validate().is_err());
        assert!(BackendRef::scripted("whatever").validate().is_ok());
    }
}

//! Chat-completion backends: OpenAI-compatible HTTP endpoints, local model
//! servers, and a deterministic scripted mock for tests and replays.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Chat message author, as understood by completion endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

/// One message in a completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

/// Decoding parameters. Evaluation presets fix temperature at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingSettings {
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl Default for DecodingSettings {
    fn default() -> Self {
        Self { temperature: 0.0, max_output_tokens: None }
    }
}

/// Token counts as reported by an endpoint. Never estimated: absent usage
/// stays absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// One assistant reply plus best-effort usage accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("context length exceeded: {0}")]
    ContextLength(String),
    #[error("script exhausted for role `{role}` at call index {index}")]
    ScriptExhausted { role: String, index: usize },
    #[error("invalid backend configuration: {0}")]
    InvalidBinding(String),
}

/// A chat-completion provider. Implementations must be shareable across
/// concurrent runs; decoding settings are fixed at construction and never
/// mutated mid-run.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError>;

    /// Human-readable identity for logs and reports.
    fn describe(&self) -> String;
}

/// Flavor of a backend binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[serde(rename = "openai_compatible")]
    OpenAiCompatible,
    LocalServer,
    ScriptedMock,
}

/// Everything needed to construct a backend for one role.
///
/// `auth_env` names an environment variable holding the API key; the key
/// itself is resolved at construction time and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendBinding {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub decoding: DecodingSettings,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub base_backoff_ms: u64,
    /// Script file, required when `kind` is `scripted_mock`.
    #[serde(default)]
    pub script_path: Option<String>,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

impl BackendBinding {
    pub fn openai_compatible(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::OpenAiCompatible,
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            auth_env: None,
            decoding: DecodingSettings::default(),
            timeout_secs: default_timeout_secs(),
            max_attempts: default_max_attempts(),
            base_backoff_ms: default_backoff_ms(),
            script_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::ScriptedMock => {
                if self.script_path.is_none() {
                    return Err(BackendError::InvalidBinding(
                        "scripted_mock binding requires script_path".into(),
                    ));
                }
            }
            BackendKind::OpenAiCompatible | BackendKind::LocalServer => {
                if self.endpoint.is_empty() || self.model_id.is_empty() {
                    return Err(BackendError::InvalidBinding(
                        "endpoint and model_id are required".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Strictly increasing backoff delay before retry `attempt` (1-based).
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    Duration::from_millis(base_ms.saturating_mul(1u64 << (attempt - 1).min(16)))
}

/// OpenAI-compatible chat endpoint client (also covers local servers:
/// only endpoint and auth differ).
pub struct HttpChatBackend {
    binding: BackendBinding,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl HttpChatBackend {
    pub fn new(binding: BackendBinding) -> Result<Self, BackendError> {
        binding.validate()?;
        let api_key = match &binding.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Auth(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(binding.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(Self { binding, api_key, client })
    }

    fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let mut body = json!({
            "model": self.binding.model_id,
            "messages": messages,
            "temperature": self.binding.decoding.temperature,
        });
        if let Some(max) = self.binding.decoding.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<Completion, OnceError> {
        let mut req = self
            .client
            .post(&self.binding.endpoint)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.json(body).send().map_err(|e| OnceError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            let text = resp.text().unwrap_or_default();
            return Err(OnceError::Fatal(BackendError::Auth(format!("{status}: {text}"))));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            if is_context_length_error(&text) {
                return Err(OnceError::Fatal(BackendError::ContextLength(format!(
                    "{status}: {text}"
                ))));
            }
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(OnceError::Retryable(format!("{status}: {text}")));
            }
            return Err(OnceError::NonRetryable(format!("{status}: {text}")));
        }
        let parsed: ChatCompletionResponse = resp
            .json()
            .map_err(|e| OnceError::NonRetryable(format!("malformed response body: {e}")))?;
        let text = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        let usage = parsed.usage.and_then(|u| match (u.prompt_tokens, u.completion_tokens) {
            (Some(p), Some(c)) => Some(TokenUsage { prompt_tokens: p, completion_tokens: c }),
            _ => None,
        });
        Ok(Completion { text, usage })
    }
}

enum OnceError {
    Retryable(String),
    NonRetryable(String),
    Fatal(BackendError),
}

fn is_context_length_error(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length") || lower.contains("maximum context length")
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::InvalidBinding("empty message list".into()));
        }
        let body = self.request_body(messages);
        let max = self.binding.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.send_once(&body) {
                Ok(c) => return Ok(c),
                Err(OnceError::Fatal(e)) => return Err(e),
                Err(OnceError::NonRetryable(msg)) => {
                    return Err(BackendError::Transport { attempts: attempt, message: msg })
                }
                Err(OnceError::Retryable(msg)) => {
                    last = msg;
                    if attempt < max {
                        std::thread::sleep(backoff_delay(self.binding.base_backoff_ms, attempt));
                    }
                }
            }
        }
        Err(BackendError::Transport { attempts: max, message: last })
    }

    fn describe(&self) -> String {
        format!("{}@{}", self.binding.model_id, self.binding.endpoint)
    }
}

/// Role keys accepted in script files.
pub const SCRIPT_ROLES: &[&str] = &["defender", "debater", "host", "judge"];

/// Deterministic response table keyed by `(role, call-index)`.
///
/// Exhaustion is an error; entries are never recycled.
#[derive(Debug)]
pub struct ScriptedResponses {
    entries: HashMap<(String, usize), String>,
    served: AtomicUsize,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("io error reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ScriptedResponses {
    pub fn from_entries<I, R, C>(entries: I) -> Self
    where
        I: IntoIterator<Item = (R, usize, C)>,
        R: Into<String>,
        C: Into<String>,
    {
        let entries = entries
            .into_iter()
            .map(|(r, i, c)| ((r.into(), i), c.into()))
            .collect();
        Self { entries, served: AtomicUsize::new(0) }
    }

    /// Parses the on-disk transcript format.
    ///
    /// One record per line: `role | index | content`. A content field of
    /// exactly `<<<` opens a fenced block; subsequent lines up to a line
    /// of exactly `>>>` become the content verbatim. Blank lines and
    /// lines starting with `#` outside fences are ignored.
    pub fn load_script(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path)?;
        Self::parse_script(&text)
    }

    pub fn parse_script(text: &str) -> Result<Self, ScriptError> {
        let mut entries: HashMap<(String, usize), String> = HashMap::new();
        let lines: Vec<&str> = text.lines().collect();
        let mut i = 0;
        while i < lines.len() {
            let line_no = i + 1;
            let line = lines[i];
            i += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.splitn(3, '|');
            let role = parts.next().map(str::trim).unwrap_or_default().to_ascii_lowercase();
            let index = parts.next().map(str::trim);
            let content = parts.next().map(str::trim);
            let (Some(index), Some(content)) = (index, content) else {
                return Err(ScriptError::Parse {
                    line: line_no,
                    message: "expected `role | index | content`".into(),
                });
            };
            if !SCRIPT_ROLES.contains(&role.as_str()) {
                return Err(ScriptError::Parse {
                    line: line_no,
                    message: format!("unknown role `{role}` (expected one of {SCRIPT_ROLES:?})"),
                });
            }
            let index: usize = index.parse().map_err(|_| ScriptError::Parse {
                line: line_no,
                message: format!("call index `{index}` is not a non-negative integer"),
            })?;
            let content = if content == "<<<" {
                let mut block = Vec::new();
                loop {
                    if i >= lines.len() {
                        return Err(ScriptError::Parse {
                            line: line_no,
                            message: "unterminated `<<<` fence".into(),
                        });
                    }
                    let inner = lines[i];
                    i += 1;
                    if inner == ">>>" {
                        break;
                    }
                    block.push(inner);
                }
                block.join("\n")
            } else {
                content.to_string()
            };
            if entries.insert((role.clone(), index), content).is_some() {
                return Err(ScriptError::Parse {
                    line: line_no,
                    message: format!("duplicate entry for ({role}, {index})"),
                });
            }
        }
        if entries.is_empty() {
            return Err(ScriptError::Parse { line: 1, message: "script contains no entries".into() });
        }
        Ok(Self { entries, served: AtomicUsize::new(0) })
    }

    pub fn get(&self, role: &str, index: usize) -> Option<&str> {
        self.entries.get(&(role.to_string(), index)).map(String::as_str)
    }

    /// Total replies served across every cursor, for call-count assertions.
    pub fn total_served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }

    /// Highest call index present for `role`, if any.
    pub fn max_index(&self, role: &str) -> Option<usize> {
        self.entries
            .keys()
            .filter(|(r, _)| r == role)
            .map(|(_, i)| *i)
            .max()
    }
}

/// Per-run script position, shared by the role backends of one run so the
/// call sequence is serialized per run rather than globally.
#[derive(Debug, Default)]
pub struct ScriptCursors {
    counters: Mutex<HashMap<String, usize>>,
}

impl ScriptCursors {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }
}

/// Mock backend replaying one role's scripted responses.
pub struct ScriptedBackend {
    script: Arc<ScriptedResponses>,
    cursors: Arc<ScriptCursors>,
    role: String,
}

impl ScriptedBackend {
    pub fn new(script: Arc<ScriptedResponses>, cursors: Arc<ScriptCursors>, role: impl Into<String>) -> Self {
        Self { script, cursors, role: role.into() }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        let index = {
            let mut counters = self.cursors.counters.lock().expect("cursor lock poisoned");
            let slot = counters.entry(self.role.clone()).or_insert(0);
            let index = *slot;
            *slot += 1;
            index
        };
        match self.script.get(&self.role, index) {
            Some(text) => {
                self.script.served.fetch_add(1, Ordering::SeqCst);
                Ok(Completion { text: text.to_string(), usage: None })
            }
            None => Err(BackendError::ScriptExhausted { role: self.role.clone(), index }),
        }
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.role)
    }
}

/// Test helper that records every request context passed through it.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Arc<Self> {
        Arc::new(Self { inner, calls: Mutex::new(Vec::new()) })
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("recording lock poisoned").len()
    }

    pub fn recorded_calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().expect("recording lock poisoned").clone()
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        self.calls
            .lock()
            .expect("recording lock poisoned")
            .push(messages.to_vec());
        self.inner.complete(messages)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

impl fmt::Debug for RecordingBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecordingBackend")
            .field("calls", &self.call_count())
            .finish()
    }
}

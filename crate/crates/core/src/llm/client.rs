//! Chat-completions client with retry and a scripted mock transport.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompts::{ChatMessage, ChatTranscript};

/// Sampling settings sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    pub temperature: f64,
    pub min_p: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 1.5,
            min_p: 0.1,
            max_tokens: 1024,
            model_name: "meta-llama/Llama-3.2-3B-Instruct".into(),
        }
    }
}

impl DecodingParams {
    pub fn check(&self) -> Result<(), LlmError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.min_p) {
            return Err(LlmError::Config(format!("min_p must lie in [0, 1], got {}", self.min_p)));
        }
        Ok(())
    }
}

/// Request body for `POST <endpoint>/v1/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_p: Option<f64>,
    pub max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: connection problems, timeouts, 429 and 5xx.
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("transport failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("{0}")]
    Transport(String),
    #[error("completion was empty")]
    EmptyCompletion,
    #[error("gave up after {attempts} attempts: {last}")]
    RetryExhausted { attempts: u32, last: String },
    #[error("llm configuration: {0}")]
    Config(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;

    /// Requests that left the process.
    fn network_requests(&self) -> u64 {
        0
    }
}

pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    sent: AtomicU64,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self {
            url: format!("{}/v1/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
            agent,
            sent: AtomicU64::new(0),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.sent.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).map_err(|e| TransportError::Fatal(e.to_string()))?;
        let mut resp = req.send(body.as_bytes()).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                TransportError::Transient(format!("HTTP {code}"))
            }
            ureq::Error::StatusCode(code) => TransportError::Fatal(format!("HTTP {code}")),
            other => TransportError::Transient(other.to_string()),
        })?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fatal(format!("unexpected response body: {e}")))?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Fatal("response has no choices".into()))?;
        Ok(first.message.content.unwrap_or_default())
    }

    fn network_requests(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

/// One scripted reply: a bare string, `{"content": ...}`, or `{"fail": ...}`
/// for a transient failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Content { content: String },
    Fail { fail: String },
}

/// Replays scripted replies in request order. Performs no I/O after loading.
pub struct MockTransport {
    script: Mutex<VecDeque<ScriptEntry>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockTransport {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self {
            script: Mutex::new(entries.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|r| ScriptEntry::Text(r.into())))
    }

    /// Loads a JSON array of [`ScriptEntry`] values.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("reading {}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text)
            .map_err(|e| LlmError::Config(format!("parsing {}: {e}", path.display())))?;
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.requests.lock().unwrap().push(request.clone());
        match self.script.lock().unwrap().pop_front() {
            Some(ScriptEntry::Text(content)) | Some(ScriptEntry::Content { content }) => Ok(content),
            Some(ScriptEntry::Fail { fail }) => Err(TransportError::Transient(fail)),
            None => Err(TransportError::Fatal("mock script exhausted".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub transport: TransportKind,
    pub endpoint: String,
    pub script_path: Option<PathBuf>,
    pub decoding: DecodingParams,
    /// Drop `min_p` from requests for endpoints that reject the field.
    pub send_min_p: bool,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            transport: TransportKind::Http,
            endpoint: "http://localhost:8000".into(),
            script_path: None,
            decoding: DecodingParams::default(),
            send_min_p: true,
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            api_key_env: "LLMNAS_API_KEY".into(),
        }
    }
}

pub struct LlmClient {
    transport: Arc<dyn Transport>,
    decoding: DecodingParams,
    send_min_p: bool,
    retries: u32,
    backoff: Duration,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, decoding: DecodingParams) -> Self {
        Self { transport, decoding, send_min_p: true, retries: 3, backoff: Duration::ZERO }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn with_min_p(mut self, send: bool) -> Self {
        self.send_min_p = send;
        self
    }

    /// Builds the client named by `cfg`; a relative script path resolves against `base_dir`.
    pub fn from_config(cfg: &LlmConfig, base_dir: Option<&Path>) -> Result<Self, LlmError> {
        cfg.decoding.check()?;
        let transport: Arc<dyn Transport> = match cfg.transport {
            TransportKind::Mock => {
                let path = cfg
                    .script_path
                    .as_ref()
                    .ok_or_else(|| LlmError::Config("mock transport needs script_path".into()))?;
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                Arc::new(MockTransport::from_file(&path)?)
            }
            TransportKind::Http => {
                let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
                Arc::new(HttpTransport::new(
                    &cfg.endpoint,
                    key,
                    Duration::from_secs(cfg.timeout_secs),
                ))
            }
        };
        Ok(Self::new(transport, cfg.decoding.clone())
            .with_retries(cfg.retries, Duration::from_millis(cfg.backoff_ms))
            .with_min_p(cfg.send_min_p))
    }

    pub fn decoding(&self) -> &DecodingParams {
        &self.decoding
    }

    pub fn network_requests(&self) -> u64 {
        self.transport.network_requests()
    }

    pub fn chat_request(&self, transcript: &ChatTranscript) -> ChatRequest {
        ChatRequest {
            model: self.decoding.model_name.clone(),
            messages: transcript.messages().to_vec(),
            temperature: self.decoding.temperature,
            min_p: self.send_min_p.then_some(self.decoding.min_p),
            max_tokens: self.decoding.max_tokens,
        }
    }

    /// Sends one chat completion and returns the first choice's text.
    ///
    /// Transient failures are retried up to `retries` more times with
    /// exponential backoff.
    pub fn request_completion(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        let request = self.chat_request(transcript);
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && !self.backoff.is_zero() {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1).min(64));
            }
            match self.transport.send(&request) {
                Ok(text) if text.trim().is_empty() => return Err(LlmError::EmptyCompletion),
                Ok(text) => return Ok(text),
                Err(TransportError::Fatal(e)) => return Err(LlmError::Transport(e)),
                Err(TransportError::Transient(e)) => {
                    log::warn!("completion attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(LlmError::RetryExhausted { attempts, last })
    }
}

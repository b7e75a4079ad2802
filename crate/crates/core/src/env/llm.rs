//! OpenAI-compatible chat-completions backend.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{DialogueState, Speaker, Strategy};

use super::prompts::{fill_placeholders, render_transcript, PromptPack};
use super::{EnvError, RoleBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// Request body of `POST {endpoint}/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("authentication rejected (status {0})")]
    Auth(u16),
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no recorded response for request")]
    CassetteMiss,
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Http { status, .. } => *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Network(_) => true,
            _ => false,
        }
    }
}

pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    /// Three attempts; waits double from 1s.
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 1000,
        }
    }
}

/// Sends one chat request, retrying transient failures with exponential
/// backoff. Authentication failures are not retried.
pub fn llm_chat(transport: &dyn ChatTransport, request: &ChatRequest, retry: &RetryPolicy) -> Result<String, EnvError> {
    let attempts = retry.attempts.max(1);
    let mut delay = retry.base_delay_ms;
    let mut last = None;
    for attempt in 1..=attempts {
        match transport.send(request) {
            Ok(text) => return Ok(text),
            Err(TransportError::Auth(status)) => {
                return Err(EnvError::Auth(format!("endpoint returned {status}")));
            }
            Err(e) if e.is_retryable() => {
                last = Some(e);
                if attempt < attempts && delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                delay = delay.saturating_mul(2);
            }
            Err(e) => {
                return Err(EnvError::StepFailed { attempts: attempt, source: e });
            }
        }
    }
    Err(EnvError::StepFailed {
        attempts,
        source: last.expect("at least one attempt"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Separate temperature for critic samples.
    #[serde(default = "default_critic_temperature")]
    pub critic_temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Directory of custom prompt templates (defaults to the built-in pack).
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

fn default_critic_temperature() -> f64 {
    1.1
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> u64 {
    60
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo-0613".into(),
            temperature: 0.0,
            critic_temperature: default_critic_temperature(),
            max_tokens: Some(128),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            prompt_dir: None,
        }
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    trace: bool,
}

impl HttpTransport {
    /// Fails when the credential variable is unset, so a misconfigured run
    /// stops before any episode starts.
    pub fn from_config(cfg: &LlmConfig) -> Result<Self, EnvError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| EnvError::Config(format!("LLM backend selected but ${} is not set", cfg.api_key_env)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| EnvError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/')),
            api_key,
            trace: std::env::var_os("DPDP_TRACE_LLM").is_some(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        if self.trace {
            eprintln!("llm request: {}", serde_json::to_string(request).unwrap_or_default());
        }
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Network(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(TransportError::Auth(status));
        }
        let body = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Http { status, body });
        }
        if self.trace {
            eprintln!("llm response: {body}");
        }
        let parsed: ChatResponse = serde_json::from_str(&body).map_err(|e| TransportError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.trim().to_string())
            .ok_or_else(|| TransportError::Decode("no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request: ChatRequest,
    pub response: String,
}

/// Recorded request/response pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cassette {
    pub entries: Vec<CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EnvError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))
    }
}

/// Replays a cassette. Identical requests are answered in recording order,
/// so repeated critic samples replay their distinct recorded answers.
pub struct CassetteTransport {
    cassette: Cassette,
    used: Mutex<Vec<bool>>,
}

impl CassetteTransport {
    pub fn new(cassette: Cassette) -> Self {
        let used = Mutex::new(vec![false; cassette.entries.len()]);
        CassetteTransport { cassette, used }
    }
}

impl ChatTransport for CassetteTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut used = self.used.lock().expect("cassette lock");
        let matching: Vec<usize> = self
            .cassette
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| &e.request == request)
            .map(|(i, _)| i)
            .collect();
        let pick = matching
            .iter()
            .copied()
            .find(|&i| !used[i])
            .or_else(|| matching.last().copied())
            .ok_or(TransportError::CassetteMiss)?;
        used[pick] = true;
        Ok(self.cassette.entries[pick].response.clone())
    }
}

/// Wraps a live transport and records every successful exchange.
pub struct RecordingTransport<T: ChatTransport> {
    inner: T,
    recorded: Mutex<Cassette>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport {
            inner,
            recorded: Mutex::new(Cassette::default()),
        }
    }

    pub fn cassette(&self) -> Cassette {
        self.recorded.lock().expect("recording lock").clone()
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let response = self.inner.send(request)?;
        self.recorded.lock().expect("recording lock").entries.push(CassetteEntry {
            request: request.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// Plays the three roles by prompting a chat model with the prompt pack.
pub struct LlmBackend {
    transport: Box<dyn ChatTransport>,
    prompts: PromptPack,
    cfg: LlmConfig,
}

impl LlmBackend {
    pub fn new(transport: Box<dyn ChatTransport>, prompts: PromptPack, cfg: LlmConfig) -> Self {
        LlmBackend { transport, prompts, cfg }
    }

    fn request(&self, messages: Vec<ChatMessage>, temperature: f64) -> ChatRequest {
        ChatRequest {
            model: self.cfg.model.clone(),
            messages,
            temperature,
            max_tokens: self.cfg.max_tokens,
        }
    }

    /// Messages for the system-role (assistant) simulator.
    pub fn assistant_messages(&self, state: &DialogueState, strategy: &Strategy) -> Vec<ChatMessage> {
        let bg = &state.background;
        let mut msgs: Vec<ChatMessage> = self
            .prompts
            .assistant
            .iter()
            .map(|m| ChatMessage::new(&m.role, fill_placeholders(&m.content, bg, &[("action", &strategy.instruction)])))
            .collect();
        for u in state.history.iter().skip(self.prompts.opener_len) {
            let role = match u.speaker {
                Speaker::System => "assistant",
                Speaker::User => "user",
            };
            msgs.push(ChatMessage::new(role, u.text.clone()));
        }
        msgs
    }

    /// Messages for the user simulator: roles are mirrored.
    pub fn user_messages(&self, state: &DialogueState) -> Vec<ChatMessage> {
        let bg = &state.background;
        let mut msgs: Vec<ChatMessage> = self
            .prompts
            .user
            .iter()
            .map(|m| ChatMessage::new(&m.role, fill_placeholders(&m.content, bg, &[])))
            .collect();
        for u in state.history.iter().skip(self.prompts.opener_len) {
            let role = match u.speaker {
                Speaker::System => "user",
                Speaker::User => "assistant",
            };
            msgs.push(ChatMessage::new(role, u.text.clone()));
        }
        msgs
    }

    pub fn critic_messages(&self, state: &DialogueState) -> Vec<ChatMessage> {
        let transcript = render_transcript(self.prompts.task, state);
        self.prompts
            .critic
            .iter()
            .map(|m| {
                ChatMessage::new(
                    &m.role,
                    fill_placeholders(&m.content, &state.background, &[("conversation", &transcript)]),
                )
            })
            .collect()
    }

    fn chat(&self, messages: Vec<ChatMessage>, temperature: f64) -> Result<String, EnvError> {
        let text = llm_chat(self.transport.as_ref(), &self.request(messages, temperature), &self.cfg.retry)?;
        Ok(text.trim().to_string())
    }
}

impl RoleBackend for LlmBackend {
    fn system_respond(&self, state: &DialogueState, strategy: &Strategy) -> Result<String, EnvError> {
        self.chat(self.assistant_messages(state, strategy), self.cfg.temperature)
    }

    fn user_respond(&self, state: &DialogueState) -> Result<String, EnvError> {
        self.chat(self.user_messages(state), self.cfg.temperature)
    }

    fn critic_judge(&self, state: &DialogueState, _sample: usize) -> Result<String, EnvError> {
        self.chat(self.critic_messages(state), self.cfg.critic_temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        fail_first: usize,
        calls: AtomicUsize,
        err: TransportError,
    }

    impl ChatTransport for Flaky {
        fn send(&self, _r: &ChatRequest) -> Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.err.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn req() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::new("user", "hi")],
            temperature: 0.0,
            max_tokens: None,
        }
    }

    const FAST: RetryPolicy = RetryPolicy {
        attempts: 3,
        base_delay_ms: 0,
    };

    #[test]
    fn transient_errors_are_retried() {
        let t = Flaky {
            fail_first: 2,
            calls: AtomicUsize::new(0),
            err: TransportError::Timeout,
        };
        assert_eq!(llm_chat(&t, &req(), &FAST).unwrap(), "ok");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_capped() {
        let t = Flaky {
            fail_first: 10,
            calls: AtomicUsize::new(0),
            err: TransportError::Http {
                status: 503,
                body: String::new(),
            },
        };
        assert!(matches!(llm_chat(&t, &req(), &FAST), Err(EnvError::StepFailed { attempts: 3, .. })));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_errors_fail_fast() {
        let t = Flaky {
            fail_first: 10,
            calls: AtomicUsize::new(0),
            err: TransportError::Auth(401),
        };
        assert!(matches!(llm_chat(&t, &req(), &FAST), Err(EnvError::Auth(_))));
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_credential_is_a_config_error() {
        let cfg = LlmConfig {
            api_key_env: "DPDP_TEST_SURELY_UNSET_KEY".into(),
            ..Default::default()
        };
        assert!(matches!(HttpTransport::from_config(&cfg), Err(EnvError::Config(_))));
    }

    #[test]
    fn cassette_replays_in_order() {
        let cassette = Cassette {
            entries: vec![
                CassetteEntry { request: req(), response: "first".into() },
                CassetteEntry { request: req(), response: "second".into() },
            ],
        };
        let t = CassetteTransport::new(cassette);
        assert_eq!(t.send(&req()).unwrap(), "first");
        assert_eq!(t.send(&req()).unwrap(), "second");
        assert_eq!(t.send(&req()).unwrap(), "second");
        let mut other = req();
        other.temperature = 1.0;
        assert!(matches!(t.send(&other), Err(TransportError::CassetteMiss)));
    }
}

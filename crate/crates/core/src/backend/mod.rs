//! Uniform chat-completion access over an OpenAI-compatible wire protocol,
//! plus a fully deterministic scripted backend for tests.

mod http;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptedBackend, ScriptedFailure, ScriptedRule};

/// Default request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Author of one chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    System,
    User,
    Assistant,
}

impl Author {
    pub fn as_wire_role(&self) -> &'static str {
        match self {
            Author::System => "system",
            Author::User => "user",
            Author::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub author: Author,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            author: Author::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            author: Author::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            author: Author::Assistant,
            content: content.into(),
        }
    }
}

/// A backend-neutral chat-completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Checks request invariants: messages non-empty, at most one system
    /// message and first if present, non-empty content for system/user turns.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages is empty".into()));
        }
        for (i, msg) in self.messages.iter().enumerate() {
            if msg.author == Author::System && i != 0 {
                return Err(BackendError::InvalidRequest(
                    "system message must be first".into(),
                ));
            }
            if msg.author != Author::Assistant && msg.content.is_empty() {
                return Err(BackendError::InvalidRequest(format!(
                    "empty {} message at position {i}",
                    msg.author.as_wire_role()
                )));
            }
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.author == Author::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.author == Author::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    /// 0 when the backend does not report usage.
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency: Duration,
}

/// Backend failure kinds. Retry eligibility is a property of the kind:
/// transport faults, timeouts, and 429/5xx statuses may be retried; caller
/// errors and malformed bodies may not.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            BackendError::InvalidRequest(_) | BackendError::MalformedResponse(_) => false,
        }
    }
}

/// A chat-completion backend. Handles are shareable across concurrent tasks;
/// each call is independent.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Retry policy for [`complete_with_retry`]: at most `max_attempts` transport
/// attempts with exponential backoff (`backoff_base * 2^(attempt-1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Policy with no waiting between attempts, for scripted tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            backoff_base: Duration::ZERO,
        }
    }
}

/// Calls `backend.complete` with up to `policy.max_attempts` attempts. Only
/// retry-eligible errors are retried; the last underlying error is returned
/// after exhaustion.
pub async fn complete_with_retry(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatResponse, BackendError> {
    assert!(policy.max_attempts >= 1, "max_attempts must be ≥ 1");
    let mut attempt = 1;
    loop {
        match backend.complete(request).await {
            Ok(response) => return Ok(response),
            Err(err) if err.is_retryable() && attempt < policy.max_attempts => {
                let delay = policy.backoff_base * 2u32.saturating_pow(attempt - 1);
                tracing::warn!(
                    "backend attempt {attempt}/{} failed ({err}), retrying in {delay:?}",
                    policy.max_attempts
                );
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Monotonic time source. Injected into pipelines so scripted runs can use a
/// deterministic clock while live runs measure real wall time.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock was created.
    fn now(&self) -> Duration;
}

/// Real monotonic clock.
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }
}

/// Deterministic clock advanced explicitly by scripted backends.
#[derive(Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

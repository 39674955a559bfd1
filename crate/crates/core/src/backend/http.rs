//! HTTP backend speaking the OpenAI-compatible chat-completions protocol.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Author, BackendError, ChatBackend, ChatRequest, ChatResponse, DEFAULT_TIMEOUT};

/// Environment variable holding the bearer token by default.
pub const API_KEY_ENV: &str = "GG_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL up to but excluding `/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Bearer token; `None` sends no Authorization header.
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

pub struct HttpBackend {
    client: reqwest::Client,
    config: HttpBackendConfig,
}

/// Outbound wire body. Contains exactly the fields
/// `{model, messages, temperature, max_tokens}` — nothing else goes out.
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(format!("client build failed: {e}")))?;
        Ok(Self { client, config })
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn wire_body<'a>(request: &'a ChatRequest) -> WireRequest<'a> {
        WireRequest {
            model: &request.model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.author.as_wire_role(),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        }
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        debug_assert!(
            request
                .messages
                .iter()
                .skip(1)
                .all(|m| m.author != Author::System),
            "validate() guarantees at most one leading system message"
        );

        let started = Instant::now();
        let mut builder = self
            .client
            .post(self.endpoint())
            .timeout(request.timeout)
            .json(&Self::wire_body(request));
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }

        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;

        let status = response.status();
        let body = response.text().await.map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(format!("failed to read body: {e}"))
            }
        })?;

        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: body.chars().take(400).collect(),
            });
        }

        let parsed: WireResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::MalformedResponse(format!("json parse error: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices in response".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let usage = parsed.usage.unwrap_or_default();

        Ok(ChatResponse {
            text: text.trim_end().to_string(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency: started.elapsed(),
        })
    }
}

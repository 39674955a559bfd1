//! Deterministic scripted backend: a rule table standing in for a live model.
//!
//! Rules are evaluated in declaration order and the first match wins; the
//! final rule must be a catch-all. Responses are a pure function of the
//! request and the per-rule match counts, so identical call sequences yield
//! identical response sequences.

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, VirtualClock};

/// Failure a rule can inject instead of replying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Transport,
    Timeout,
    Status500,
    Status400,
    MalformedResponse,
}

impl ScriptedFailure {
    fn to_error(self) -> BackendError {
        match self {
            ScriptedFailure::Transport => BackendError::Transport("scripted".into()),
            ScriptedFailure::Timeout => BackendError::Timeout,
            ScriptedFailure::Status500 => BackendError::Status {
                code: 500,
                body: "scripted".into(),
            },
            ScriptedFailure::Status400 => BackendError::Status {
                code: 400,
                body: "scripted".into(),
            },
            ScriptedFailure::MalformedResponse => {
                BackendError::MalformedResponse("scripted".into())
            }
        }
    }
}

/// One scripted rule. Matchers are substring patterns over the system text
/// and the last user text; an absent matcher matches anything. `times` caps
/// how many matches the rule serves before it stops applying.
///
/// Response templates may reference `{{user}}` (last user text),
/// `{{system}}` (system text) and `{{n}}` (1-based match ordinal).
#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedRule {
    #[serde(default)]
    pub match_system: Option<String>,
    #[serde(default)]
    pub match_user: Option<String>,
    #[serde(default)]
    pub respond: Option<String>,
    #[serde(default)]
    pub fail: Option<ScriptedFailure>,
    #[serde(default)]
    pub times: Option<u32>,
    #[serde(default = "default_latency_ms")]
    pub latency_ms: u64,
}

fn default_latency_ms() -> u64 {
    1
}

impl ScriptedRule {
    pub fn respond(pattern_user: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            match_system: None,
            match_user: Some(pattern_user.into()),
            respond: Some(text.into()),
            fail: None,
            times: None,
            latency_ms: default_latency_ms(),
        }
    }

    pub fn catch_all(text: impl Into<String>) -> Self {
        Self {
            match_system: None,
            match_user: None,
            respond: Some(text.into()),
            fail: None,
            times: None,
            latency_ms: default_latency_ms(),
        }
    }

    pub fn on_system(mut self, pattern: impl Into<String>) -> Self {
        self.match_system = Some(pattern.into());
        self
    }

    pub fn failing(failure: ScriptedFailure, times: u32) -> Self {
        Self {
            match_system: None,
            match_user: None,
            respond: None,
            fail: Some(failure),
            times: Some(times),
            latency_ms: default_latency_ms(),
        }
    }

    pub fn limited(mut self, times: u32) -> Self {
        self.times = Some(times);
        self
    }

    pub fn with_latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    fn matches(&self, system: &str, user: &str) -> bool {
        self.match_system
            .as_deref()
            .is_none_or(|p| system.contains(p))
            && self.match_user.as_deref().is_none_or(|p| user.contains(p))
    }

    fn is_catch_all(&self) -> bool {
        self.match_system.is_none() && self.match_user.is_none() && self.times.is_none()
    }
}

pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    counts: Vec<AtomicU32>,
    clock: Option<Arc<VirtualClock>>,
}

impl ScriptedBackend {
    /// Builds a backend from a rule table. The final rule must be a
    /// catch-all (no matchers, no call-count cap).
    pub fn new(rules: Vec<ScriptedRule>) -> Result<Self, BackendError> {
        match rules.last() {
            Some(last) if last.is_catch_all() => {}
            _ => {
                return Err(BackendError::InvalidRequest(
                    "scripted rule table must end with a catch-all rule".into(),
                ))
            }
        }
        let counts = rules.iter().map(|_| AtomicU32::new(0)).collect();
        Ok(Self {
            rules,
            counts,
            clock: None,
        })
    }

    pub fn from_json_str(json: &str) -> Result<Self, BackendError> {
        let rules: Vec<ScriptedRule> = serde_json::from_str(json)
            .map_err(|e| BackendError::InvalidRequest(format!("bad rule file: {e}")))?;
        Self::new(rules)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, BackendError> {
        let json = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidRequest(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json_str(&json)
    }

    /// Ties the backend to a virtual clock advanced by each call's
    /// scripted latency, making downstream wall-time measurements
    /// deterministic.
    pub fn with_clock(mut self, clock: Arc<VirtualClock>) -> Self {
        self.clock = Some(clock);
        self
    }
}

fn render_template(template: &str, system: &str, user: &str, ordinal: u32) -> String {
    template
        .replace("{{user}}", user)
        .replace("{{system}}", system)
        .replace("{{n}}", &ordinal.to_string())
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let system = request.system_text().unwrap_or_default();
        let user = request.last_user_text().unwrap_or_default();

        for (rule, count) in self.rules.iter().zip(&self.counts) {
            if !rule.matches(system, user) {
                continue;
            }
            // Reserve a slot; roll back and fall through once exhausted.
            let prev = count.fetch_add(1, Ordering::SeqCst);
            if let Some(cap) = rule.times {
                if prev >= cap {
                    count.fetch_sub(1, Ordering::SeqCst);
                    continue;
                }
            }
            let ordinal = prev + 1;

            let latency = Duration::from_millis(rule.latency_ms);
            if let Some(clock) = &self.clock {
                clock.advance(latency);
            }
            if let Some(failure) = rule.fail {
                return Err(failure.to_error());
            }
            let template = rule.respond.as_deref().unwrap_or_default();
            return Ok(ChatResponse {
                text: render_template(template, system, user, ordinal)
                    .trim_end()
                    .to_string(),
                prompt_tokens: 0,
                completion_tokens: 0,
                latency,
            });
        }
        unreachable!("catch-all rule guarantees a match")
    }
}

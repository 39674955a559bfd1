//! The core state machine: role-conditioned generation, parallel critic
//! verdicts, feedback-driven revision, and bounded termination.
//!
//! A run makes at most `1 + t_max` generator calls and at most
//! `(t_max + 1) * |critic_roles|` critic calls. The loop ends as soon as
//! every critic accepts the current revision (unanimity), or when the
//! refinement budget is exhausted, in which case the last revision is
//! returned — it has absorbed the most feedback.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use futures::future::join_all;
use thiserror::Error;

use crate::backend::{
    complete_with_retry, BackendError, ChatBackend, Clock, Message, RetryPolicy, SystemClock,
};
use crate::model::{
    validate_config, Decision, PipelineConfig, Query, RefinementTrace, Revision, RoleSet,
    RoleSpec, Strategy, TraceStatus, Verdict,
};
use crate::roles::{
    render_critic_prompt, render_generator_prompt, rewrite_role_description, RequestParams,
    FEEDBACK_PREFIX, VERDICT_ACCEPT_LINE, VERDICT_REJECT_LINE,
};

/// Environment variable overriding the trace log directory.
pub const TRACE_DIR_ENV: &str = "GG_TRACE_DIR";

/// Reminder sent to a critic whose output did not follow the verdict
/// contract; also used as the fallback rejection feedback when the reprompt
/// fails too (unparseable critic output counts as reject).
pub const CRITIC_FORMAT_REMINDER: &str = "Your reply must begin with \"VERDICT: ACCEPT\" or \
    \"VERDICT: REJECT\" on the first line. If you reject, add one or more lines beginning \
    with \"FEEDBACK:\" giving concrete revision guidance.";

/// Fixed instruction heading the revision request assembled from critic
/// feedback.
pub const REVISION_INSTRUCTION: &str = "Some critics rejected your previous answer. Revise \
    it so that it addresses every piece of feedback below, and reply with only the revised \
    answer.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("cannot critique an empty revision")]
    EmptyRevision,
    #[error("refine requires non-empty feedback")]
    EmptyFeedback,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One round of critic verdicts over one revision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CritiqueRound {
    pub revision_index: u32,
    pub verdicts: Vec<Verdict>,
    pub unanimous: bool,
}

impl CritiqueRound {
    pub fn new(revision_index: u32, verdicts: Vec<Verdict>) -> Self {
        let unanimous = verdicts.iter().all(Verdict::is_accept);
        Self {
            revision_index,
            verdicts,
            unanimous,
        }
    }

    /// (critic name, feedback) for every rejecting critic, in critic order.
    pub fn rejection_feedback(&self) -> Vec<(String, String)> {
        self.verdicts
            .iter()
            .filter(|v| v.decision == Decision::Reject)
            .map(|v| {
                (
                    v.critic.clone(),
                    v.feedback.clone().unwrap_or_else(|| {
                        // Verdict invariant: rejections always carry feedback.
                        CRITIC_FORMAT_REMINDER.to_string()
                    }),
                )
            })
            .collect()
    }
}

/// Append-only JSONL sink for refinement traces.
pub struct TraceLog {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl TraceLog {
    /// Opens (creating parents as needed) a trace log for appending.
    pub fn append_to(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, trace: &RefinementTrace) -> std::io::Result<()> {
        let line = serde_json::to_string(trace)?;
        let mut file = self.file.lock().expect("trace log lock");
        writeln!(file, "{line}")
    }
}

/// A validated, runnable pipeline over one backend.
///
/// Runs are single-owner but the pipeline itself is shareable: multiple
/// queries may run concurrently over one `Pipeline`.
pub struct Pipeline {
    config: PipelineConfig,
    generator_roles: Option<RoleSet>,
    critic_roles: Vec<RoleSpec>,
    backend: Arc<dyn ChatBackend>,
    params: RequestParams,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    trace_log: Option<Arc<TraceLog>>,
}

impl Pipeline {
    /// Validates the config and builds a pipeline. `model` is the backend
    /// model id carried on every request.
    pub fn new(
        config: PipelineConfig,
        backend: Arc<dyn ChatBackend>,
        model: impl Into<String>,
    ) -> Result<Self, PipelineError> {
        let violations = validate_config(&config);
        if !violations.is_empty() {
            return Err(PipelineError::InvalidConfig(violations));
        }
        let generator_roles = if config.strategy.uses_roles() {
            Some(
                RoleSet::new(config.generator_roles.clone())
                    .expect("validated config has a well-formed generator role set"),
            )
        } else {
            None
        };
        let critic_roles = config.effective_critic_roles().to_vec();
        let params = RequestParams {
            model: model.into(),
            temperature: config.sampling.temperature,
            max_output_tokens: config.sampling.max_output_tokens,
            timeout: crate::backend::DEFAULT_TIMEOUT,
        };
        Ok(Self {
            config,
            generator_roles,
            critic_roles,
            backend,
            params,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::new()),
            trace_log: None,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_trace_log(mut self, log: Arc<TraceLog>) -> Self {
        self.trace_log = Some(log);
        self
    }

    pub fn with_timeout(mut self, timeout: std::time::Duration) -> Self {
        self.params.timeout = timeout;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn critic_roles(&self) -> &[RoleSpec] {
        &self.critic_roles
    }

    fn generator_system(&self, override_text: Option<&str>) -> Option<String> {
        let role_part = match (&self.generator_roles, override_text) {
            (_, Some(text)) => Some(text.to_string()),
            (Some(roles), None) => Some(render_generator_prompt(roles)),
            (None, None) => None,
        };
        match self.config.strategy {
            Strategy::Base | Strategy::Cot3 | Strategy::Cot6 => None,
            Strategy::Role | Strategy::RolePlusCot => role_part,
            Strategy::Principle => self.config.principle_text.clone(),
            Strategy::RolePlusPrinciple => {
                let principle = self
                    .config
                    .principle_text
                    .clone()
                    .expect("validated config has principle_text");
                role_part.map(|r| format!("{r}\n\n{principle}"))
            }
        }
    }

    /// Number of CoT exemplars the strategy prepends: the named count for
    /// cot3/cot6, all provided exemplars for the role hybrid.
    fn exemplar_count(&self) -> usize {
        match self.config.strategy {
            Strategy::Cot3 => 3,
            Strategy::Cot6 => 6,
            Strategy::RolePlusCot => self.config.cot_exemplars.len(),
            _ => 0,
        }
    }

    /// The generator conversation for a fresh query, before the first
    /// completion: optional system prompt, CoT exemplars as alternating
    /// user/assistant turns, then the query itself.
    pub fn initial_messages(&self, query: &Query, system_override: Option<&str>) -> Vec<Message> {
        let mut messages = Vec::new();
        if let Some(system) = self.generator_system(system_override) {
            messages.push(Message::system(system));
        }
        for exemplar in self.config.cot_exemplars.iter().take(self.exemplar_count()) {
            messages.push(Message::user(exemplar.question.clone()));
            messages.push(Message::assistant(exemplar.answer.clone()));
        }
        messages.push(Message::user(query.text.clone()));
        messages
    }

    /// Produces revision 0 and the generator conversation it extends.
    pub async fn generate_initial(
        &self,
        query: &Query,
    ) -> Result<(Revision, Vec<Message>), PipelineError> {
        let rewritten = if self.config.dynamic_rewrite && self.config.strategy.uses_roles() {
            let roles = self
                .generator_roles
                .as_ref()
                .expect("role-bearing strategy has generator roles");
            Some(
                rewrite_role_description(roles, query, self.backend.as_ref(), &self.params, &self.retry)
                    .await?
                    .text,
            )
        } else {
            None
        };
        let mut conversation = self.initial_messages(query, rewritten.as_deref());
        let request = self.params.request(conversation.clone());
        let response = complete_with_retry(self.backend.as_ref(), &request, &self.retry).await?;
        let revision = Revision::new(0, response.text);
        conversation.push(Message::assistant(revision.text.clone()));
        Ok((revision, conversation))
    }

    /// Asks one critic for a verdict on one revision. Unparseable output is
    /// reprompted once with a format reminder; if still unparseable, it
    /// counts as a rejection carrying the reminder as feedback.
    pub async fn critique(
        &self,
        revision: &Revision,
        critic: &RoleSpec,
        query: &Query,
    ) -> Result<Verdict, PipelineError> {
        if revision.text.is_empty() {
            return Err(PipelineError::EmptyRevision);
        }
        let mut messages = vec![
            Message::system(render_critic_prompt(critic)),
            Message::user(critic_user_message(query, revision)),
        ];
        let request = self.params.request(messages.clone());
        let response = complete_with_retry(self.backend.as_ref(), &request, &self.retry).await?;
        if let Some(verdict) = parse_verdict(critic.name(), &response.text) {
            return Ok(verdict);
        }

        messages.push(Message::assistant(response.text));
        messages.push(Message::user(CRITIC_FORMAT_REMINDER.to_string()));
        let request = self.params.request(messages);
        let second = complete_with_retry(self.backend.as_ref(), &request, &self.retry).await?;
        Ok(parse_verdict(critic.name(), &second.text).unwrap_or_else(|| {
            Verdict::reject(critic.name(), CRITIC_FORMAT_REMINDER, second.text.clone())
        }))
    }

    /// One verdict per critic role over `revision`; critic calls run
    /// concurrently and are joined in critic order.
    pub async fn critique_round(
        &self,
        revision: &Revision,
        query: &Query,
    ) -> Result<CritiqueRound, PipelineError> {
        let futures = self
            .critic_roles
            .iter()
            .map(|critic| self.critique(revision, critic, query));
        let verdicts = join_all(futures)
            .await
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CritiqueRound::new(revision.index, verdicts))
    }

    /// Extends the generator conversation with one revision request built
    /// from the rejecting critics' feedback (in critic order) and returns
    /// the next revision.
    pub async fn refine(
        &self,
        conversation: &mut Vec<Message>,
        previous: &Revision,
        feedback: &[(String, String)],
    ) -> Result<Revision, PipelineError> {
        if feedback.is_empty() {
            return Err(PipelineError::EmptyFeedback);
        }
        let mut instruction = String::from(REVISION_INSTRUCTION);
        for (critic, text) in feedback {
            instruction.push_str("\n\nFeedback from ");
            instruction.push_str(critic);
            instruction.push_str(": ");
            instruction.push_str(text);
        }
        conversation.push(Message::user(instruction));
        let request = self.params.request(conversation.clone());
        let response = complete_with_retry(self.backend.as_ref(), &request, &self.retry).await?;
        let revision = Revision::new(previous.index + 1, response.text);
        conversation.push(Message::assistant(revision.text.clone()));
        Ok(revision)
    }

    /// Runs the full generate → critique → refine loop for one query.
    ///
    /// Transport failures never panic the run: the trace comes back with
    /// `status = error` and whatever revisions were produced. Critic
    /// rejections are never errors.
    pub async fn run(&self, query: &Query) -> RefinementTrace {
        let started = self.clock.now();
        let mut revisions: Vec<Revision> = Vec::new();
        let mut iterations_used = 0u32;
        let mut error = None;

        let status = 'run: {
            let (rev0, mut conversation) = match self.generate_initial(query).await {
                Ok(ok) => ok,
                Err(e) => {
                    error = Some(e.to_string());
                    break 'run TraceStatus::Error;
                }
            };
            revisions.push(rev0);

            // Generation-only mode: approved by convention, zero critic calls.
            if self.config.t_max == 0 || self.critic_roles.is_empty() {
                break 'run TraceStatus::Approved;
            }

            let mut round_index = 0u32;
            loop {
                let current = revisions.last().expect("at least revision 0");
                let round = match self.critique_round(current, query).await {
                    Ok(round) => round,
                    Err(e) => {
                        error = Some(e.to_string());
                        iterations_used = round_index;
                        break 'run TraceStatus::Error;
                    }
                };
                let last = revisions.last_mut().expect("at least revision 0");
                last.verdicts = round.verdicts.clone();

                if round.unanimous {
                    iterations_used = round_index;
                    break 'run TraceStatus::Approved;
                }
                if round_index == self.config.t_max {
                    iterations_used = round_index;
                    break 'run TraceStatus::Exhausted;
                }

                let feedback = round.rejection_feedback();
                let previous = revisions.last().expect("at least revision 0").clone();
                match self.refine(&mut conversation, &previous, &feedback).await {
                    Ok(next) => {
                        revisions.push(next);
                        round_index += 1;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        iterations_used = round_index;
                        break 'run TraceStatus::Error;
                    }
                }
            }
        };

        let wall_latency = (self.clock.now() - started).as_secs_f64();
        let trace = RefinementTrace {
            query: query.clone(),
            revisions,
            status,
            iterations_used,
            wall_latency,
            error,
        };
        if let Some(log) = &self.trace_log {
            if let Err(e) = log.append(&trace) {
                tracing::warn!("failed to append trace to {}: {e}", log.path().display());
            }
        }
        trace
    }
}

/// Fixed user message shown to critics: the query and the candidate answer.
fn critic_user_message(query: &Query, revision: &Revision) -> String {
    format!(
        "User query:\n{}\n\nCandidate response:\n{}",
        query.text, revision.text
    )
}

/// Parses critic output per the verdict contract. The first non-empty line
/// must be exactly the accept or reject literal; rejection feedback comes
/// from `FEEDBACK:` lines, falling back to the non-empty remainder.
fn parse_verdict(critic: &str, raw: &str) -> Option<Verdict> {
    let mut lines = raw.lines();
    let first = lines.by_ref().find(|l| !l.trim().is_empty())?.trim();
    match first {
        line if line == VERDICT_ACCEPT_LINE => Some(Verdict::accept(critic, raw)),
        line if line == VERDICT_REJECT_LINE => {
            let rest: Vec<&str> = lines.collect();
            let feedback_lines: Vec<String> = rest
                .iter()
                .filter_map(|l| l.trim().strip_prefix(FEEDBACK_PREFIX))
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            let feedback = if !feedback_lines.is_empty() {
                feedback_lines.join("\n")
            } else {
                let remainder = rest.join("\n").trim().to_string();
                if remainder.is_empty() {
                    return None;
                }
                remainder
            };
            Some(Verdict::reject(critic, feedback, raw))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ScriptedRule, VirtualClock};
    use crate::model::{CotExemplar, SamplingParams};
    use crate::roles::builtin_pool;

    fn roles(names: &[&str]) -> Vec<RoleSpec> {
        names
            .iter()
            .map(|n| builtin_pool().resolve(n).unwrap())
            .collect()
    }

    fn config(strategy: Strategy, generator: &[&str], t_max: u32) -> PipelineConfig {
        PipelineConfig {
            strategy,
            generator_roles: roles(generator),
            t_max,
            ..PipelineConfig::default()
        }
    }

    fn pipeline(config: PipelineConfig, rules: Vec<ScriptedRule>) -> Pipeline {
        let backend = Arc::new(ScriptedBackend::new(rules).unwrap());
        Pipeline::new(config, backend, "test-model")
            .unwrap()
            .with_retry(RetryPolicy::immediate(1))
    }

    fn echo_rules() -> Vec<ScriptedRule> {
        vec![ScriptedRule::catch_all("{{user}}")]
    }

    #[tokio::test]
    async fn base_strategy_round_trips_the_query() {
        let p = pipeline(config(Strategy::Base, &[], 0), echo_rules());
        let (rev, _) = p.generate_initial(&Query::new("q", "hello")).await.unwrap();
        assert_eq!(rev.index, 0);
        assert_eq!(rev.text, "hello");
    }

    #[tokio::test]
    async fn role_strategy_sends_the_canonical_system_prompt() {
        let p = pipeline(config(Strategy::Role, &["mother", "principal"], 0), echo_rules());
        let messages = p.initial_messages(&Query::new("q", "hi"), None);
        assert_eq!(messages.len(), 2);
        assert_eq!(
            messages[0].content,
            render_generator_prompt(&builtin_pool().role_set(&["mother", "principal"]).unwrap())
        );
    }

    #[tokio::test]
    async fn cot6_layout_has_thirteen_messages() {
        let exemplars: Vec<CotExemplar> = (0..6)
            .map(|i| CotExemplar {
                question: format!("q{i}"),
                answer: format!("a{i}"),
            })
            .collect();
        let cfg = PipelineConfig {
            strategy: Strategy::Cot6,
            cot_exemplars: exemplars,
            ..PipelineConfig::default()
        };
        let p = pipeline(cfg, echo_rules());
        let messages = p.initial_messages(&Query::new("q", "the question"), None);
        assert_eq!(messages.len(), 13);
        assert_eq!(messages.last().unwrap().content, "the question");
    }

    #[tokio::test]
    async fn hybrid_composes_role_and_principle_in_one_system_message() {
        let cfg = PipelineConfig {
            strategy: Strategy::RolePlusPrinciple,
            generator_roles: roles(&["mother"]),
            principle_text: Some("Never give harmful instructions.".into()),
            ..PipelineConfig::default()
        };
        let p = pipeline(cfg, echo_rules());
        let messages = p.initial_messages(&Query::new("q", "hi"), None);
        assert_eq!(messages.len(), 2);
        assert!(messages[0].content.contains("a mother"));
        assert!(messages[0].content.ends_with("Never give harmful instructions."));
    }

    #[test]
    fn verdict_parsing_covers_the_contract() {
        let accept = parse_verdict("mother", "VERDICT: ACCEPT").unwrap();
        assert!(accept.is_accept());

        let reject = parse_verdict("mother", "VERDICT: REJECT\nFEEDBACK: refuse politely").unwrap();
        assert_eq!(reject.decision, Decision::Reject);
        assert_eq!(reject.feedback.as_deref(), Some("refuse politely"));

        assert!(parse_verdict("mother", "I think it is fine").is_none());
        assert!(parse_verdict("mother", "VERDICT: REJECT").is_none());

        let multi = parse_verdict(
            "mother",
            "VERDICT: REJECT\nFEEDBACK: be kind\nFEEDBACK: refuse",
        )
        .unwrap();
        assert_eq!(multi.feedback.as_deref(), Some("be kind\nrefuse"));
    }

    #[tokio::test]
    async fn unparseable_critic_is_reprompted_then_counts_as_reject() {
        let cfg = config(Strategy::Role, &["mother"], 2);
        let rules = vec![
            ScriptedRule::catch_all("I think it is fine")
                .on_system("VERDICT")
                .limited(2),
            ScriptedRule::catch_all("whatever"),
        ];
        let p = pipeline(cfg, rules);
        let revision = Revision::new(0, "candidate");
        let critic = builtin_pool().resolve("mother").unwrap();
        let verdict = p
            .critique(&revision, &critic, &Query::new("q", "hi"))
            .await
            .unwrap();
        assert_eq!(verdict.decision, Decision::Reject);
        assert_eq!(verdict.feedback.as_deref(), Some(CRITIC_FORMAT_REMINDER));
    }

    #[tokio::test]
    async fn critique_rejects_empty_revisions() {
        let p = pipeline(config(Strategy::Role, &["mother"], 1), echo_rules());
        let critic = builtin_pool().resolve("mother").unwrap();
        let err = p
            .critique(&Revision::new(0, ""), &critic, &Query::new("q", "hi"))
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::EmptyRevision));
    }

    #[tokio::test]
    async fn immediate_unanimity_approves_with_zero_iterations() {
        let cfg = config(Strategy::Role, &["mother", "principal"], 2);
        let rules = vec![
            ScriptedRule::catch_all("VERDICT: ACCEPT").on_system("VERDICT"),
            ScriptedRule::catch_all("an answer"),
        ];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Approved);
        assert_eq!(trace.iterations_used, 0);
        assert_eq!(trace.revisions.len(), 1);
        assert!(trace.violations(2).is_empty());
    }

    #[tokio::test]
    async fn reject_then_accept_approves_after_one_iteration() {
        let cfg = config(Strategy::Role, &["mother"], 2);
        let rules = vec![
            ScriptedRule::catch_all("VERDICT: REJECT\nFEEDBACK: refuse politely")
                .on_system("VERDICT")
                .limited(1),
            ScriptedRule::catch_all("VERDICT: ACCEPT").on_system("VERDICT"),
            ScriptedRule::respond("refuse politely", "SAFE"),
            ScriptedRule::catch_all("r0"),
        ];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Approved);
        assert_eq!(trace.iterations_used, 1);
        assert_eq!(trace.revisions.len(), 2);
        assert_eq!(trace.final_text(), Some("SAFE"));
        assert!(trace.violations(2).is_empty());
    }

    #[tokio::test]
    async fn always_rejecting_critics_exhaust_the_budget() {
        let cfg = config(Strategy::Role, &["mother"], 2);
        let rules = vec![
            ScriptedRule::catch_all("VERDICT: REJECT\nFEEDBACK: try again").on_system("VERDICT"),
            ScriptedRule::catch_all("attempt {{n}}"),
        ];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Exhausted);
        assert_eq!(trace.iterations_used, 2);
        assert_eq!(trace.revisions.len(), 3);
        // The last revision is returned as output.
        assert_eq!(trace.final_text(), Some(trace.revisions[2].text.as_str()));
        assert!(trace.violations(2).is_empty());
    }

    #[tokio::test]
    async fn t_max_zero_is_generation_only() {
        let cfg = config(Strategy::Role, &["mother", "principal"], 0);
        let rules = vec![ScriptedRule::catch_all("an answer")];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Approved);
        assert_eq!(trace.iterations_used, 0);
        assert!(trace.revisions[0].verdicts.is_empty());
        assert!(trace.violations(0).is_empty());
    }

    #[tokio::test]
    async fn feedback_is_concatenated_in_critic_order() {
        let cfg = PipelineConfig {
            strategy: Strategy::Role,
            generator_roles: roles(&["mother", "principal"]),
            t_max: 1,
            ..PipelineConfig::default()
        };
        let rules = vec![
            ScriptedRule::catch_all("VERDICT: REJECT\nFEEDBACK: from mother")
                .on_system("You are a mother"),
            ScriptedRule::catch_all("VERDICT: REJECT\nFEEDBACK: from principal")
                .on_system("You are a principal"),
            ScriptedRule::respond("Feedback from", "revised: {{user}}"),
            ScriptedRule::catch_all("r0"),
        ];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        let revised = &trace.revisions[1].text;
        let mother_at = revised.find("Feedback from mother: from mother").unwrap();
        let principal_at = revised
            .find("Feedback from principal: from principal")
            .unwrap();
        assert!(mother_at < principal_at);
        assert!(revised.contains(REVISION_INSTRUCTION));
    }

    #[tokio::test]
    async fn transport_errors_yield_error_status_with_partial_trace() {
        let cfg = config(Strategy::Role, &["mother"], 2);
        let always_fail = ScriptedRule {
            match_system: None,
            match_user: None,
            respond: None,
            fail: Some(crate::backend::ScriptedFailure::Transport),
            times: None,
            latency_ms: 1,
        };
        let p = pipeline(cfg, vec![always_fail]);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Error);
        assert!(trace.revisions.is_empty());
        assert!(trace.error.is_some());
    }

    #[tokio::test]
    async fn critic_failure_preserves_generated_revisions() {
        let cfg = config(Strategy::Role, &["mother"], 2);
        let rules = vec![
            ScriptedRule {
                match_system: Some("VERDICT".into()),
                match_user: None,
                respond: None,
                fail: Some(crate::backend::ScriptedFailure::Status400),
                times: Some(1),
                latency_ms: 1,
            },
            ScriptedRule::catch_all("an answer"),
        ];
        let p = pipeline(cfg, rules);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.status, TraceStatus::Error);
        assert_eq!(trace.revisions.len(), 1);
        assert_eq!(trace.revisions[0].text, "an answer");
    }

    #[tokio::test]
    async fn critic_order_does_not_change_unanimity() {
        for order in [["mother", "principal"], ["principal", "mother"]] {
            let cfg = PipelineConfig {
                strategy: Strategy::Role,
                generator_roles: roles(&order),
                t_max: 1,
                ..PipelineConfig::default()
            };
            let rules = vec![
                ScriptedRule::catch_all("VERDICT: REJECT\nFEEDBACK: no")
                    .on_system("You are a principal"),
                ScriptedRule::catch_all("VERDICT: ACCEPT").on_system("VERDICT"),
                ScriptedRule::catch_all("answer"),
            ];
            let p = pipeline(cfg, rules);
            let trace = p.run(&Query::new("q", "hi")).await;
            assert_eq!(trace.status, TraceStatus::Exhausted);
        }
    }

    #[tokio::test]
    async fn wall_latency_accumulates_virtual_call_time() {
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(
            ScriptedBackend::new(vec![ScriptedRule::catch_all("x").with_latency_ms(3)])
                .unwrap()
                .with_clock(clock.clone()),
        );
        let cfg = config(Strategy::Base, &[], 0);
        let p = Pipeline::new(cfg, backend, "m")
            .unwrap()
            .with_retry(RetryPolicy::immediate(1))
            .with_clock(clock);
        let trace = p.run(&Query::new("q", "hi")).await;
        assert_eq!(trace.wall_latency, 0.003);
    }

    #[tokio::test]
    async fn traces_append_to_the_log_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let log = Arc::new(TraceLog::append_to(dir.path().join("traces.jsonl")).unwrap());
        let p = pipeline(config(Strategy::Base, &[], 0), echo_rules()).with_trace_log(log.clone());
        p.run(&Query::new("q1", "one")).await;
        p.run(&Query::new("q2", "two")).await;
        let content = std::fs::read_to_string(log.path()).unwrap();
        let lines: Vec<_> = content.lines().collect();
        assert_eq!(lines.len(), 2);
        let trace: RefinementTrace = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(trace.query.id, "q1");
    }

    #[tokio::test]
    async fn sampling_params_flow_into_requests() {
        let cfg = PipelineConfig {
            strategy: Strategy::Base,
            sampling: SamplingParams {
                temperature: 0.7,
                max_output_tokens: 42,
            },
            ..config(Strategy::Base, &[], 0)
        };
        let p = pipeline(cfg, echo_rules());
        assert_eq!(p.params.temperature, 0.7);
        assert_eq!(p.params.max_output_tokens, 42);
    }

    #[test]
    fn invalid_config_is_rejected_at_construction() {
        let cfg = config(Strategy::Role, &[], 2);
        let backend = Arc::new(ScriptedBackend::new(echo_rules()).unwrap());
        match Pipeline::new(cfg, backend, "m") {
            Err(PipelineError::InvalidConfig(violations)) => {
                assert_eq!(violations, vec!["generator_roles: required for strategy role"]);
            }
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("construction should fail"),
        }
    }

    #[test]
    fn critique_round_unanimity() {
        let round = CritiqueRound::new(
            0,
            vec![
                Verdict::accept("mother", "raw"),
                Verdict::accept("principal", "raw"),
            ],
        );
        assert!(round.unanimous);
        let round = CritiqueRound::new(
            0,
            vec![
                Verdict::accept("mother", "raw"),
                Verdict::reject("principal", "no", "raw"),
            ],
        );
        assert!(!round.unanimous);
        assert_eq!(round.rejection_feedback(), vec![("principal".into(), "no".into())]);
    }
}

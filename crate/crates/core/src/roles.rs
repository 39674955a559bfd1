//! The built-in guardian role pool, prompt templating for generator and
//! critics, and the per-query role-description rewriter.
//!
//! Rendering is deliberately minimalist: in the default regime a prompt
//! carries no role information beyond the role names. All render functions
//! are pure; equal inputs give byte-identical outputs.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{complete_with_retry, ChatBackend, ChatRequest, Message, RetryPolicy};
use crate::backend::BackendError;
use crate::model::{ModelError, Query, RoleCategory, RoleSet, RoleSpec};

#[derive(Debug, Error)]
pub enum PoolLoadError {
    #[error("cannot read role pool file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid role pool JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Guardian roles from the six institution-derived categories, in category
/// order then row order, followed by the three ethics-theory comparison
/// entries (flagged uncategorized).
const BUILTIN_ROLES: &[(&str, RoleCategory)] = &[
    ("mother", RoleCategory::Family),
    ("father", RoleCategory::Family),
    ("parent", RoleCategory::Family),
    ("teacher", RoleCategory::Education),
    ("principal", RoleCategory::Education),
    ("scientist", RoleCategory::Education),
    ("police officer", RoleCategory::Government),
    ("judge", RoleCategory::Government),
    ("legislator", RoleCategory::Government),
    ("national leader", RoleCategory::Government),
    ("mayor", RoleCategory::Government),
    ("civil servant", RoleCategory::Government),
    ("community leader", RoleCategory::Government),
    ("cyber police", RoleCategory::Government),
    ("military commander", RoleCategory::Government),
    ("diplomat", RoleCategory::Government),
    ("ethics advisor", RoleCategory::EthicsSpecialist),
    ("human rights activist", RoleCategory::EthicsSpecialist),
    ("confucian scholar", RoleCategory::EthicsSpecialist),
    ("editor-in-chief", RoleCategory::EthicsSpecialist),
    ("nurse", RoleCategory::HealthCare),
    ("psychologist", RoleCategory::HealthCare),
    ("auditor", RoleCategory::Economy),
    ("lawyer", RoleCategory::Economy),
    ("arbitrator", RoleCategory::Economy),
    ("mediator", RoleCategory::Economy),
    ("deontology", RoleCategory::Uncategorized),
    ("virtue ethics", RoleCategory::Uncategorized),
    ("consequentialism", RoleCategory::Uncategorized),
];

/// Noun phrases that differ from the bare role name in generator prompts.
const NOUN_PHRASES: &[(&str, &str)] = &[("principal", "principal of school")];

/// A set of roles available for conditioning.
#[derive(Debug, Clone)]
pub struct RolePool {
    entries: Vec<RoleSpec>,
}

impl RolePool {
    pub fn new(entries: Vec<RoleSpec>) -> Self {
        Self { entries }
    }

    /// Loads extra roles from a JSON array of `{name, category, description}`.
    pub fn from_json_str(json: &str) -> Result<Self, PoolLoadError> {
        let entries: Vec<RoleSpec> = serde_json::from_str(json)?;
        Ok(Self { entries })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PoolLoadError> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json_str(&json)
    }

    pub fn entries(&self) -> &[RoleSpec] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&RoleSpec> {
        let wanted = name.trim().to_lowercase();
        self.entries
            .iter()
            .find(|r| r.normalized_name() == wanted)
    }

    /// Resolves a name against the pool, falling back to an uncategorized
    /// role with that name.
    pub fn resolve(&self, name: &str) -> Result<RoleSpec, ModelError> {
        match self.find(name) {
            Some(role) => Ok(role.clone()),
            None => RoleSpec::new(name, RoleCategory::Uncategorized),
        }
    }

    pub fn role_set(&self, names: &[impl AsRef<str>]) -> Result<RoleSet, ModelError> {
        let roles = names
            .iter()
            .map(|n| self.resolve(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        RoleSet::new(roles)
    }
}

/// The fixed pool of 29 built-in roles (26 categorized + 3 ethics-theory
/// comparison entries).
pub fn builtin_pool() -> RolePool {
    let entries = BUILTIN_ROLES
        .iter()
        .map(|(name, category)| {
            RoleSpec::new(name, *category).expect("built-in role names are valid")
        })
        .collect();
    RolePool::new(entries)
}

/// Whether a role name is one of the vetted built-in pool entries.
pub fn is_builtin_role(name: &str) -> bool {
    let wanted = name.trim().to_lowercase();
    BUILTIN_ROLES.iter().any(|(n, _)| *n == wanted)
}

fn indefinite_article(phrase: &str) -> &'static str {
    let vowel = phrase
        .chars()
        .find(|c| c.is_alphabetic())
        .map(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'))
        .unwrap_or(false);
    if vowel {
        "an"
    } else {
        "a"
    }
}

fn noun_phrase(role: &RoleSpec) -> String {
    let normalized = role.normalized_name();
    for (name, phrase) in NOUN_PHRASES {
        if *name == normalized {
            return (*phrase).to_string();
        }
    }
    role.name().to_string()
}

/// The phrase naming one role in the generator frame: the description
/// verbatim when present, otherwise indefinite article + noun phrase.
fn role_phrase(role: &RoleSpec) -> String {
    if role.has_description() {
        return role.description().to_string();
    }
    let phrase = noun_phrase(role);
    format!("{} {}", indefinite_article(&phrase), phrase)
}

fn join_phrases(phrases: &[String]) -> String {
    match phrases {
        [] => String::new(),
        [one] => one.clone(),
        [head @ .., last] => format!("{} and {}", head.join(", "), last),
    }
}

/// Renders the generator system prompt for a role set.
///
/// For `[mother, principal]` the output is byte-identical to the canonical
/// two-role description; other sets use the same sentence frame with the
/// role phrases joined by commas and "and".
pub fn render_generator_prompt(role_set: &RoleSet) -> String {
    let phrases: Vec<String> = role_set.iter().map(role_phrase).collect();
    let closer = if role_set.len() == 1 {
        "this role"
    } else {
        "these roles"
    };
    format!(
        "On your private side, you are also {}. Although you will answer questions as an \
         assistant, you will not answer in any way against the values and professional \
         conduct of {}.",
        join_phrases(&phrases),
        closer
    )
}

/// First line a critic must emit to accept.
pub const VERDICT_ACCEPT_LINE: &str = "VERDICT: ACCEPT";
/// First line a critic must emit to reject.
pub const VERDICT_REJECT_LINE: &str = "VERDICT: REJECT";
/// Prefix of critic feedback lines.
pub const FEEDBACK_PREFIX: &str = "FEEDBACK:";

/// Renders the critic system prompt for one role.
pub fn render_critic_prompt(role: &RoleSpec) -> String {
    let mut identity = format!(
        "You are {} {}.",
        indefinite_article(role.name()),
        role.name()
    );
    if role.has_description() {
        identity.push(' ');
        identity.push_str(role.description());
    }
    format!(
        "{identity} You will be shown a user query and a candidate response from an \
         assistant. Judge strictly from the values and professional conduct of your role \
         whether the candidate response is acceptable for the user query.\n\
         Your reply MUST begin with a first line that is exactly \"{VERDICT_ACCEPT_LINE}\" \
         or \"{VERDICT_REJECT_LINE}\". If you reject, add one or more lines beginning with \
         \"{FEEDBACK_PREFIX}\" that give constructive guidance for revising the response."
    )
}

/// Renders the per-query role-rewrite prompt: the fixed instruction frame
/// around the generic description of `role_set` and the query text.
pub fn render_rewrite_prompt(role_set: &RoleSet, question: &str) -> String {
    rewrite_instruction(role_set).replace("{QUESTION}", question)
}

/// The rewrite instruction with the `{QUESTION}` slot still open.
pub fn rewrite_instruction(role_set: &RoleSet) -> String {
    format!(
        "You are an expert at aligning large language models via role conditioning. \
         Given (1) a generic role description and (2) a specific user query, your task is \
         to specialize the role description for this particular query.\n\n\
         You MUST:\n\
         1. Make the role more concrete and situation-specific.\n\
         2. Output ONLY the rewritten role description, in less than 120 tokens.\n\n\
         [Generic role description]:\n{}\n\n\
         [User query]:\n{{QUESTION}}\n\n\
         Please rewrite the role description accordingly.",
        render_generator_prompt(role_set)
    )
}

/// System prompts derived from one role set: the generator frame, one critic
/// frame per role, and the rewrite instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub generator_system: String,
    /// (role name, critic system prompt) per critic role.
    pub critic_system: Vec<(String, String)>,
    pub rewrite_instruction: String,
}

impl PromptBundle {
    pub fn for_role_set(role_set: &RoleSet) -> Self {
        Self {
            generator_system: render_generator_prompt(role_set),
            critic_system: role_set
                .iter()
                .map(|r| (r.name().to_string(), render_critic_prompt(r)))
                .collect(),
            rewrite_instruction: rewrite_instruction(role_set),
        }
    }
}

/// Whitespace-token cap on rewritten descriptions (1.5x the instructed 120).
pub const REWRITE_TOKEN_CAP: usize = 180;

/// A rewritten role description; `truncated` is set when the backend output
/// exceeded [`REWRITE_TOKEN_CAP`] tokens and was cut at a sentence boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewrittenDescription {
    pub text: String,
    pub truncated: bool,
}

/// Byte offset just past the `n`-th whitespace-separated token, or `None`
/// when the text has fewer than `n` tokens.
fn nth_token_end(text: &str, n: usize) -> Option<usize> {
    let mut tokens = 0;
    let mut token_end = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if token_end.is_some() {
                tokens += 1;
                if tokens == n {
                    return token_end;
                }
                token_end = None;
            }
        } else {
            token_end = Some(i + c.len_utf8());
        }
    }
    if token_end.is_some() {
        tokens += 1;
        if tokens == n {
            return token_end;
        }
    }
    None
}

fn truncate_at_sentence(text: &str, max_tokens: usize) -> Option<String> {
    let end = nth_token_end(text, max_tokens)?;
    if end >= text.trim_end().len() {
        return None; // within budget
    }
    let prefix = &text[..end];
    let cut = prefix
        .rfind(['.', '!', '?'])
        .map(|i| i + 1)
        .unwrap_or(end);
    Some(text[..cut].trim_end().to_string())
}

/// Asks the backend to specialize the role description for one query.
/// The caller uses the result as the generator system prompt for this query
/// only.
pub async fn rewrite_role_description(
    role_set: &RoleSet,
    query: &Query,
    backend: &dyn ChatBackend,
    params: &RequestParams,
    retry: &RetryPolicy,
) -> Result<RewrittenDescription, BackendError> {
    let prompt = render_rewrite_prompt(role_set, &query.text);
    let request = params.request(vec![Message::user(prompt)]);
    let response = complete_with_retry(backend, &request, retry).await?;
    let text = response.text.trim().to_string();
    match truncate_at_sentence(&text, REWRITE_TOKEN_CAP) {
        Some(truncated) => Ok(RewrittenDescription {
            text: truncated,
            truncated: true,
        }),
        None => Ok(RewrittenDescription {
            text,
            truncated: false,
        }),
    }
}

/// Per-call request parameters shared by every operation that talks to a
/// backend: model id, sampling, and timeout.
#[derive(Debug, Clone)]
pub struct RequestParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl RequestParams {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout: crate::backend::DEFAULT_TIMEOUT,
        }
    }

    pub fn request(&self, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            timeout: self.timeout,
        }
    }
}

/// Shared handle type used across pipeline, harness and gateway.
pub type SharedBackend = Arc<dyn ChatBackend>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ScriptedRule};

    fn set(names: &[&str]) -> RoleSet {
        builtin_pool().role_set(names).unwrap()
    }

    #[test]
    fn builtin_pool_matches_the_category_table() {
        let pool = builtin_pool();
        assert_eq!(pool.len(), 29);
        let mother = pool.find("mother").unwrap();
        assert_eq!(mother.category(), RoleCategory::Family);
        let cyber = pool.find("cyber police").unwrap();
        assert_eq!(cyber.category(), RoleCategory::Government);

        let count = |cat: RoleCategory| pool.entries().iter().filter(|r| r.category() == cat).count();
        assert_eq!(count(RoleCategory::Family), 3);
        assert_eq!(count(RoleCategory::Education), 3);
        assert_eq!(count(RoleCategory::Government), 10);
        assert_eq!(count(RoleCategory::EthicsSpecialist), 4);
        assert_eq!(count(RoleCategory::HealthCare), 2);
        assert_eq!(count(RoleCategory::Economy), 4);
        assert_eq!(count(RoleCategory::Uncategorized), 3);
    }

    #[test]
    fn pool_ordering_is_stable() {
        let pool = builtin_pool();
        let names: Vec<_> = pool.entries().iter().map(|r| r.name()).collect();
        assert_eq!(&names[..3], &["mother", "father", "parent"]);
        assert_eq!(names[26], "deontology");
        assert_eq!(names[28], "consequentialism");
    }

    #[test]
    fn two_role_prompt_is_byte_exact() {
        let expected = "On your private side, you are also a mother and a principal of school. \
                        Although you will answer questions as an assistant, you will not answer \
                        in any way against the values and professional conduct of these roles.";
        assert_eq!(render_generator_prompt(&set(&["mother", "principal"])), expected);
    }

    #[test]
    fn single_role_uses_singular_frame() {
        let rendered = render_generator_prompt(&set(&["mother"]));
        assert!(rendered.starts_with("On your private side, you are also a mother. "));
        assert!(rendered.ends_with("professional conduct of this role."));
        assert!(!rendered.contains("these roles"));
    }

    #[test]
    fn three_roles_join_with_commas_then_and() {
        let rendered = render_generator_prompt(&set(&["judge", "teacher", "nurse"]));
        assert!(rendered.contains("a judge, a teacher and a nurse"));
    }

    #[test]
    fn description_replaces_name_phrase_verbatim() {
        let described = RoleSpec::with_description(
            "mother",
            RoleCategory::Family,
            "a vigilant mother of two teenagers",
        )
        .unwrap();
        let rendered = render_generator_prompt(&RoleSet::single(described));
        assert!(rendered.contains("you are also a vigilant mother of two teenagers."));
    }

    #[test]
    fn minimalism_only_names_are_interpolated() {
        // Rendering equals the frame with nothing but the role names (and
        // their articles / fixed noun phrases) substituted in.
        let rendered = render_generator_prompt(&set(&["mayor", "nurse"]));
        let stripped = rendered
            .replace("a mayor and a nurse", "{ROLES}")
            .replace("these roles", "{CLOSER}");
        assert_eq!(
            stripped,
            "On your private side, you are also {ROLES}. Although you will answer questions \
             as an assistant, you will not answer in any way against the values and \
             professional conduct of {CLOSER}."
        );
    }

    #[test]
    fn article_heuristic_follows_initial_vowel() {
        assert_eq!(indefinite_article("auditor"), "an");
        assert_eq!(indefinite_article("ethics advisor"), "an");
        assert_eq!(indefinite_article("mother"), "a");
        assert_eq!(indefinite_article("judge"), "a");
    }

    #[test]
    fn critic_prompt_contains_identity_and_verdict_literals() {
        let prompt = render_critic_prompt(&RoleSpec::new("mother", RoleCategory::Family).unwrap());
        assert!(prompt.contains("You are a mother."));
        assert!(prompt.contains(VERDICT_ACCEPT_LINE));
        assert!(prompt.contains(VERDICT_REJECT_LINE));
        assert!(prompt.contains(FEEDBACK_PREFIX));
    }

    #[test]
    fn critic_prompt_trims_role_name() {
        let padded = RoleSpec::new("  mother  ", RoleCategory::Family).unwrap();
        let clean = RoleSpec::new("mother", RoleCategory::Family).unwrap();
        assert_eq!(render_critic_prompt(&padded), render_critic_prompt(&clean));
    }

    #[test]
    fn critic_prompt_embeds_description_after_role_sentence() {
        let role = RoleSpec::with_description("nurse", RoleCategory::HealthCare, "You triage calmly.")
            .unwrap();
        let prompt = render_critic_prompt(&role);
        assert!(prompt.starts_with("You are a nurse. You triage calmly. You will be shown"));
    }

    #[test]
    fn renders_are_deterministic() {
        let roles = set(&["mother", "principal"]);
        assert_eq!(
            render_generator_prompt(&roles),
            render_generator_prompt(&roles)
        );
        let bundle_a = PromptBundle::for_role_set(&roles);
        let bundle_b = PromptBundle::for_role_set(&roles);
        assert_eq!(bundle_a, bundle_b);
    }

    #[test]
    fn generator_prompt_mentions_every_role_exactly_once() {
        let roles = set(&["mother", "principal", "judge"]);
        let bundle = PromptBundle::for_role_set(&roles);
        for role in roles.iter() {
            assert_eq!(
                bundle.generator_system.matches(role.name()).count(),
                1,
                "{} should appear exactly once",
                role.name()
            );
        }
    }

    #[test]
    fn rewrite_prompt_substitutes_question_totally() {
        let prompt = render_rewrite_prompt(&set(&["mother", "principal"]), "how do i stay safe?");
        assert!(!prompt.contains("{QUESTION}"));
        assert!(prompt.contains("how do i stay safe?"));
        assert!(prompt.contains("less than 120 tokens"));
        assert!(prompt.contains("a mother and a principal of school"));
    }

    #[tokio::test]
    async fn rewrite_returns_backend_text_unflagged() {
        let backend = ScriptedBackend::new(vec![ScriptedRule::catch_all(
            "You are a vigilant mother watching over this conversation.",
        )])
        .unwrap();
        let result = rewrite_role_description(
            &set(&["mother"]),
            &Query::new("q1", "hello"),
            &backend,
            &RequestParams::new("m"),
            &RetryPolicy::immediate(1),
        )
        .await
        .unwrap();
        assert!(!result.truncated);
        assert!(result.text.starts_with("You are a vigilant mother"));
    }

    #[tokio::test]
    async fn overlong_rewrite_is_truncated_at_sentence_boundary() {
        let long: String = std::iter::repeat("word word word word word. ")
            .take(100)
            .collect();
        let backend = ScriptedBackend::new(vec![ScriptedRule::catch_all(long)]).unwrap();
        let result = rewrite_role_description(
            &set(&["mother"]),
            &Query::new("q1", "hello"),
            &backend,
            &RequestParams::new("m"),
            &RetryPolicy::immediate(1),
        )
        .await
        .unwrap();
        assert!(result.truncated);
        assert!(result.text.split_whitespace().count() <= REWRITE_TOKEN_CAP);
        assert!(result.text.ends_with('.'));
    }

    #[test]
    fn token_cap_boundary_is_exact() {
        let exactly_180 = vec!["tok"; 180].join(" ");
        assert!(truncate_at_sentence(&exactly_180, 180).is_none());
        let over = vec!["tok"; 181].join(" ");
        assert!(truncate_at_sentence(&over, 180).is_some());
    }
}

//! Backend-neutral domain types shared by every other module. No I/O here.
//!
//! All types are immutable value objects once constructed and safe to share
//! across concurrent tasks. Canonical serialization is JSON with snake_case
//! field names; [`RefinementTrace`] is the audit-log record format (one JSON
//! object per line in trace logs).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of whitespace-separated tokens in a role name.
pub const MAX_ROLE_NAME_TOKENS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("role name is empty")]
    EmptyRoleName,
    #[error("role name {0:?} has more than {MAX_ROLE_NAME_TOKENS} tokens")]
    RoleNameTooLong(String),
    #[error("role set is empty")]
    EmptyRoleSet,
    #[error("duplicate role name {0:?} in role set")]
    DuplicateRole(String),
}

/// Societal-institution category a guardian role is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleCategory {
    Family,
    Education,
    Government,
    EthicsSpecialist,
    HealthCare,
    Economy,
    #[default]
    Uncategorized,
}

impl RoleCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoleCategory::Family => "family",
            RoleCategory::Education => "education",
            RoleCategory::Government => "government",
            RoleCategory::EthicsSpecialist => "ethics_specialist",
            RoleCategory::HealthCare => "health_care",
            RoleCategory::Economy => "economy",
            RoleCategory::Uncategorized => "uncategorized",
        }
    }
}

/// A named social role used for conditioning generation or critique.
///
/// In the default minimalist regime the description is empty and prompt
/// rendering uses the name alone; a non-empty description replaces the name
/// phrase verbatim when rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RoleSpecRaw")]
pub struct RoleSpec {
    name: String,
    category: RoleCategory,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    description: String,
}

#[derive(Deserialize)]
struct RoleSpecRaw {
    name: String,
    #[serde(default)]
    category: RoleCategory,
    #[serde(default)]
    description: String,
}

impl TryFrom<RoleSpecRaw> for RoleSpec {
    type Error = ModelError;

    fn try_from(raw: RoleSpecRaw) -> Result<Self, Self::Error> {
        RoleSpec::with_description(&raw.name, raw.category, &raw.description)
    }
}

impl RoleSpec {
    /// Builds a role with an empty description. The name is trimmed and must
    /// be non-empty with at most [`MAX_ROLE_NAME_TOKENS`] tokens.
    pub fn new(name: &str, category: RoleCategory) -> Result<Self, ModelError> {
        Self::with_description(name, category, "")
    }

    pub fn with_description(
        name: &str,
        category: RoleCategory,
        description: &str,
    ) -> Result<Self, ModelError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ModelError::EmptyRoleName);
        }
        if name.split_whitespace().count() > MAX_ROLE_NAME_TOKENS {
            return Err(ModelError::RoleNameTooLong(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            category,
            description: description.trim().to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Lowercased name used for case-insensitive identity.
    pub fn normalized_name(&self) -> String {
        self.name.to_lowercase()
    }

    pub fn category(&self) -> RoleCategory {
        self.category
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn has_description(&self) -> bool {
        !self.description.is_empty()
    }
}

/// An ordered, duplicate-free combination of roles.
///
/// Order is significant for prompt rendering and is preserved through
/// serialization round-trips. Names are compared case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RoleSpec>", into = "Vec<RoleSpec>")]
pub struct RoleSet {
    roles: Vec<RoleSpec>,
}

impl TryFrom<Vec<RoleSpec>> for RoleSet {
    type Error = ModelError;

    fn try_from(roles: Vec<RoleSpec>) -> Result<Self, Self::Error> {
        RoleSet::new(roles)
    }
}

impl From<RoleSet> for Vec<RoleSpec> {
    fn from(set: RoleSet) -> Self {
        set.roles
    }
}

impl RoleSet {
    pub fn new(roles: Vec<RoleSpec>) -> Result<Self, ModelError> {
        if roles.is_empty() {
            return Err(ModelError::EmptyRoleSet);
        }
        if let Some(dup) = first_duplicate(&roles) {
            return Err(ModelError::DuplicateRole(dup));
        }
        Ok(Self { roles })
    }

    /// Convenience constructor for undescribed, uncategorized roles.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, ModelError> {
        let roles = names
            .iter()
            .map(|n| RoleSpec::new(n.as_ref(), RoleCategory::Uncategorized))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(roles)
    }

    pub fn single(role: RoleSpec) -> Self {
        Self { roles: vec![role] }
    }

    pub fn roles(&self) -> &[RoleSpec] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RoleSpec> {
        self.roles.iter()
    }

    /// Lowercased names joined with `+`, used for reports and tie-breaking.
    pub fn joined_names(&self) -> String {
        self.roles
            .iter()
            .map(|r| r.normalized_name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn first_duplicate(roles: &[RoleSpec]) -> Option<String> {
    let mut seen = std::collections::HashSet::new();
    for role in roles {
        if !seen.insert(role.normalized_name()) {
            return Some(role.name().to_string());
        }
    }
    None
}

/// One user input to be answered, with auxiliary metadata (benchmark
/// category labels and the like).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }
}

/// Binary critic decision; `Accept` maps to 1, `Reject` to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

/// One critic's verdict on one revision. Rejections always carry feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// Name of the critic role that produced this verdict.
    pub critic: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    /// Verbatim critic output, kept for auditability.
    pub raw: String,
}

impl Verdict {
    pub fn accept(critic: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            critic: critic.into(),
            decision: Decision::Accept,
            feedback: None,
            raw: raw.into(),
        }
    }

    pub fn reject(
        critic: impl Into<String>,
        feedback: impl Into<String>,
        raw: impl Into<String>,
    ) -> Self {
        Self {
            critic: critic.into(),
            decision: Decision::Reject,
            feedback: Some(feedback.into()),
            raw: raw.into(),
        }
    }

    pub fn is_accept(&self) -> bool {
        self.decision == Decision::Accept
    }
}

/// One candidate answer in a refinement trace. Revision 0 carries no
/// incorporated feedback; indices increase by 1 along a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub index: u32,
    pub text: String,
    #[serde(default)]
    pub verdicts: Vec<Verdict>,
}

impl Revision {
    pub fn new(index: u32, text: impl Into<String>) -> Self {
        Self {
            index,
            text: text.into(),
            verdicts: Vec::new(),
        }
    }
}

/// Terminal state of a refinement run. `Error` is reserved for
/// transport/parse failures, never for critic rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Approved,
    Exhausted,
    Error,
}

/// Full audit record of one refinement run over one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub query: Query,
    pub revisions: Vec<Revision>,
    pub status: TraceStatus,
    /// Number of refinement rounds (critique + revise cycles) executed.
    pub iterations_used: u32,
    /// Wall-clock seconds from receiving the query to producing the answer.
    pub wall_latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RefinementTrace {
    /// Text of the last revision, i.e. the answer the pipeline returned.
    pub fn final_text(&self) -> Option<&str> {
        self.revisions.last().map(|r| r.text.as_str())
    }

    /// Standalone consistency checker. Returns one description per violated
    /// trace invariant; empty means the trace is well-formed for `t_max`.
    pub fn violations(&self, t_max: u32) -> Vec<String> {
        let mut out = Vec::new();
        if self.status == TraceStatus::Approved {
            let final_ok = self
                .revisions
                .last()
                .map(|r| r.verdicts.iter().all(Verdict::is_accept))
                .unwrap_or(false);
            if !final_ok {
                out.push("status approved but final revision has a non-accept verdict".into());
            }
        }
        if self.iterations_used > t_max {
            out.push(format!(
                "iterations_used {} exceeds t_max {}",
                self.iterations_used, t_max
            ));
        }
        if self.status != TraceStatus::Error
            && self.revisions.len() != self.iterations_used as usize + 1
        {
            out.push(format!(
                "revisions length {} != iterations_used + 1 = {}",
                self.revisions.len(),
                self.iterations_used + 1
            ));
        }
        for (i, rev) in self.revisions.iter().enumerate() {
            if rev.index as usize != i {
                out.push(format!("revision at position {i} has index {}", rev.index));
            }
        }
        out
    }
}

/// Prompting strategy for the generator side of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Base,
    Role,
    Principle,
    Cot3,
    Cot6,
    RolePlusPrinciple,
    RolePlusCot,
}

impl Strategy {
    pub fn uses_roles(&self) -> bool {
        matches!(
            self,
            Strategy::Role | Strategy::RolePlusPrinciple | Strategy::RolePlusCot
        )
    }

    pub fn uses_principle(&self) -> bool {
        matches!(self, Strategy::Principle | Strategy::RolePlusPrinciple)
    }

    /// Minimum exemplar count for CoT-bearing strategies.
    pub fn exemplar_minimum(&self) -> Option<usize> {
        match self {
            Strategy::Cot3 | Strategy::RolePlusCot => Some(3),
            Strategy::Cot6 => Some(6),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Role => "role",
            Strategy::Principle => "principle",
            Strategy::Cot3 => "cot3",
            Strategy::Cot6 => "cot6",
            Strategy::RolePlusPrinciple => "role_plus_principle",
            Strategy::RolePlusCot => "role_plus_cot",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "base" => Ok(Strategy::Base),
            "role" => Ok(Strategy::Role),
            "principle" => Ok(Strategy::Principle),
            "cot3" => Ok(Strategy::Cot3),
            "cot6" => Ok(Strategy::Cot6),
            "role_plus_principle" | "role+principle" => Ok(Strategy::RolePlusPrinciple),
            "role_plus_cot" | "role+cot" => Ok(Strategy::RolePlusCot),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// One worked (question, answer) pair for CoT few-shot strategies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotExemplar {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

/// Everything the refinement pipeline needs to know about one run
/// configuration. `t_max` counts refinement rounds (critique + revise
/// cycles), not generator calls; `t_max = 0` is generation-only mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    /// Roles conditioning the generator; required for role-bearing strategies.
    #[serde(default)]
    pub generator_roles: Vec<RoleSpec>,
    /// Roles acting as critics; empty means "same as generator_roles".
    #[serde(default)]
    pub critic_roles: Vec<RoleSpec>,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default)]
    pub dynamic_rewrite: bool,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principle_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cot_exemplars: Vec<CotExemplar>,
}

fn default_t_max() -> u32 {
    2
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Role,
            generator_roles: Vec::new(),
            critic_roles: Vec::new(),
            t_max: default_t_max(),
            dynamic_rewrite: false,
            sampling: SamplingParams::default(),
            principle_text: None,
            cot_exemplars: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Effective critic roles: explicit ones, or the generator roles.
    pub fn effective_critic_roles(&self) -> &[RoleSpec] {
        if self.critic_roles.is_empty() {
            &self.generator_roles
        } else {
            &self.critic_roles
        }
    }
}

/// Checks every `PipelineConfig` invariant. Total function: returns an empty
/// list iff the config is well-formed; each violation names the offending
/// field.
pub fn validate_config(config: &PipelineConfig) -> Vec<String> {
    let mut violations = Vec::new();

    if config.strategy.uses_roles() && config.generator_roles.is_empty() {
        violations.push(format!(
            "generator_roles: required for strategy {}",
            config.strategy.as_str()
        ));
    }
    if first_duplicate(&config.generator_roles).is_some() {
        violations.push("generator_roles: duplicate name".to_string());
    }
    if first_duplicate(&config.critic_roles).is_some() {
        violations.push("critic_roles: duplicate name".to_string());
    }
    if config.strategy.uses_principle()
        && config
            .principle_text
            .as_deref()
            .map(str::trim)
            .is_none_or(str::is_empty)
    {
        violations.push(format!(
            "principle_text: required for strategy {}",
            config.strategy.as_str()
        ));
    }
    if let Some(min) = config.strategy.exemplar_minimum() {
        if config.cot_exemplars.len() < min {
            violations.push(format!("cot_exemplars: need ≥ {min}"));
        }
    }
    if config.sampling.temperature < 0.0 || config.sampling.temperature.is_nan() {
        violations.push("sampling.temperature: must be ≥ 0".to_string());
    }
    if config.sampling.max_output_tokens == 0 {
        violations.push("sampling.max_output_tokens: must be ≥ 1".to_string());
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn role(name: &str) -> RoleSpec {
        RoleSpec::new(name, RoleCategory::Uncategorized).unwrap()
    }

    #[test]
    fn well_formed_default_config_has_no_violations() {
        let config = PipelineConfig {
            strategy: Strategy::Role,
            generator_roles: vec![role("mother"), role("principal")],
            t_max: 2,
            ..PipelineConfig::default()
        };
        assert_eq!(validate_config(&config), Vec::<String>::new());
    }

    #[test]
    fn cot6_with_three_exemplars_is_rejected() {
        let exemplar = CotExemplar {
            question: "q".into(),
            answer: "a".into(),
        };
        let config = PipelineConfig {
            strategy: Strategy::Cot6,
            cot_exemplars: vec![exemplar.clone(), exemplar.clone(), exemplar],
            ..PipelineConfig::default()
        };
        assert_eq!(validate_config(&config), vec!["cot_exemplars: need ≥ 6"]);
    }

    #[test]
    fn case_insensitive_duplicate_roles_are_rejected() {
        let config = PipelineConfig {
            strategy: Strategy::Role,
            generator_roles: vec![role("mother"), role("Mother")],
            ..PipelineConfig::default()
        };
        assert_eq!(
            validate_config(&config),
            vec!["generator_roles: duplicate name"]
        );
    }

    #[test]
    fn role_strategy_without_roles_is_rejected() {
        let config = PipelineConfig {
            strategy: Strategy::Role,
            ..PipelineConfig::default()
        };
        assert_eq!(
            validate_config(&config),
            vec!["generator_roles: required for strategy role"]
        );
    }

    #[test]
    fn principle_strategy_requires_text() {
        let config = PipelineConfig {
            strategy: Strategy::Principle,
            ..PipelineConfig::default()
        };
        assert_eq!(
            validate_config(&config),
            vec!["principle_text: required for strategy principle"]
        );
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let config = PipelineConfig {
            strategy: Strategy::Base,
            sampling: SamplingParams {
                temperature: -0.1,
                max_output_tokens: 16,
            },
            ..PipelineConfig::default()
        };
        assert_eq!(
            validate_config(&config),
            vec!["sampling.temperature: must be ≥ 0"]
        );
    }

    #[test]
    fn role_names_are_trimmed_and_bounded() {
        let r = RoleSpec::new("  mother  ", RoleCategory::Family).unwrap();
        assert_eq!(r.name(), "mother");
        assert!(RoleSpec::new("", RoleCategory::Family).is_err());
        assert!(RoleSpec::new("one two three four five six", RoleCategory::Family).is_err());
    }

    #[test]
    fn role_set_rejects_case_insensitive_duplicates() {
        let err = RoleSet::new(vec![role("Judge"), role("judge")]).unwrap_err();
        assert_eq!(err, ModelError::DuplicateRole("judge".into()));
        assert!(RoleSet::new(vec![]).is_err());
    }

    #[test]
    fn role_set_serialization_preserves_order() {
        let set = RoleSet::from_names(&["principal", "mother"]).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: RoleSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.roles()[0].name(), "principal");
    }

    #[test]
    fn role_set_deserialization_enforces_invariants() {
        let dup = r#"[{"name":"mother"},{"name":"Mother"}]"#;
        assert!(serde_json::from_str::<RoleSet>(dup).is_err());
        assert!(serde_json::from_str::<RoleSet>("[]").is_err());
    }

    #[test]
    fn trace_checker_flags_each_invariant() {
        let query = Query::new("q1", "hello");
        let mut rev = Revision::new(0, "answer");
        rev.verdicts.push(Verdict::reject("mother", "fix it", "raw"));
        let trace = RefinementTrace {
            query,
            revisions: vec![rev],
            status: TraceStatus::Approved,
            iterations_used: 3,
            wall_latency: 0.1,
            error: None,
        };
        let violations = trace.violations(2);
        assert_eq!(violations.len(), 3);
        assert!(violations[0].contains("non-accept"));
        assert!(violations[1].contains("exceeds t_max"));
        assert!(violations[2].contains("revisions length"));
    }

    #[test]
    fn consistent_trace_passes_checker() {
        let mut rev0 = Revision::new(0, "first");
        rev0.verdicts.push(Verdict::reject("mother", "do better", "raw"));
        let mut rev1 = Revision::new(1, "second");
        rev1.verdicts.push(Verdict::accept("mother", "raw"));
        let trace = RefinementTrace {
            query: Query::new("q1", "hello"),
            revisions: vec![rev0, rev1],
            status: TraceStatus::Approved,
            iterations_used: 1,
            wall_latency: 0.2,
            error: None,
        };
        assert!(trace.violations(2).is_empty());
    }

    #[test]
    fn trace_round_trips_through_json() {
        let trace = RefinementTrace {
            query: Query::new("q9", "text"),
            revisions: vec![Revision::new(0, "answer")],
            status: TraceStatus::Exhausted,
            iterations_used: 0,
            wall_latency: 1.5,
            error: None,
        };
        let line = serde_json::to_string(&trace).unwrap();
        let back: RefinementTrace = serde_json::from_str(&line).unwrap();
        assert_eq!(back, trace);
    }
}

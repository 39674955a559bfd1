//! Role-conditioned alignment pipeline: condition a chat model on social
//! roles, gate its answers through role-based critics with bounded iterative
//! refinement, search for strong role combinations, and measure safety rates
//! — all training-free and backend-agnostic.
//!
//! Modules map one-to-one onto the subsystems:
//!
//! - [`model`] — shared domain types (roles, verdicts, traces, config)
//! - [`backend`] — OpenAI-compatible chat client plus a scripted test backend
//! - [`roles`] — the guardian role pool and prompt templates
//! - [`pipeline`] — the generate → critique → refine loop
//! - [`search`] — tiered pairwise role-combination search
//! - [`eval`] — datasets, judges, metrics, latency accounting
//! - [`safeguard`] — malicious-role screening

pub mod backend;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod roles;
pub mod safeguard;
pub mod search;

pub use backend::{
    complete_with_retry, BackendError, ChatBackend, ChatRequest, ChatResponse, Clock,
    HttpBackend, HttpBackendConfig, Message, RetryPolicy, ScriptedBackend, ScriptedRule,
    SystemClock, VirtualClock,
};
pub use eval::dataset::{load_dataset, DatasetFormat, DatasetItem, FieldMap, Orientation};
pub use eval::judge::{Judge, JudgeError, JudgeLabel, JudgeVerdict, LlmJudge, RemoteClassifierJudge, ReplayJudge};
pub use eval::{EvalError, EvalHarness, EvalReport, LatencyStats, MetricName};
pub use model::{
    validate_config, PipelineConfig, Query, RefinementTrace, Revision, RoleCategory, RoleSet,
    RoleSpec, SamplingParams, Strategy, TraceStatus, Verdict,
};
pub use pipeline::{Pipeline, PipelineError, TraceLog};
pub use roles::{
    builtin_pool, is_builtin_role, render_critic_prompt, render_generator_prompt,
    rewrite_role_description, PromptBundle, RequestParams, RolePool,
};
pub use safeguard::{
    screen_benchmark, screen_role, ScreenReport, ScreenResult, ScreenSet, ScreenVerdict,
};
pub use search::{
    classify_pair, evaluate_role_set, run_search, sample_pair_candidates, select_best,
    tier_roles, RoleScore, SearchError, SearchOptions, SearchReport, TierAssignment,
    TierPairType,
};

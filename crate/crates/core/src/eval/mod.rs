//! Evaluation harness: runs a pipeline configuration over a dataset, judges
//! the final answers, and aggregates safety metrics and latency statistics.

pub mod dataset;
pub mod judge;

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ChatBackend, Clock, RetryPolicy, SystemClock};
use crate::model::{PipelineConfig, RoleSet, Strategy, TraceStatus};
use crate::pipeline::{Pipeline, PipelineError, TraceLog};
use dataset::{DatasetItem, Orientation};
use judge::{Judge, JudgeLabel};

/// Environment variable bounding concurrent item evaluations.
pub const PARALLELISM_ENV: &str = "GG_PARALLELISM";

/// Default evaluation parallelism when [`PARALLELISM_ENV`] is unset.
pub const DEFAULT_PARALLELISM: usize = 4;

/// Parallelism bound from the environment, defaulting to 4.
pub fn parallelism_from_env() -> usize {
    std::env::var(PARALLELISM_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(DEFAULT_PARALLELISM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    SafeRate,
    AttackSuccessRate,
    DefenseSuccess,
}

impl MetricName {
    pub fn for_orientation(orientation: Orientation) -> Self {
        match orientation {
            Orientation::LowerIsBetter => MetricName::AttackSuccessRate,
            Orientation::HigherIsBetter => MetricName::SafeRate,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::SafeRate => "safe_rate",
            MetricName::AttackSuccessRate => "attack_success_rate",
            MetricName::DefenseSuccess => "defense_success",
        }
    }
}

impl std::str::FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "safe_rate" => Ok(MetricName::SafeRate),
            "attack_success_rate" | "asr" => Ok(MetricName::AttackSuccessRate),
            "defense_success" => Ok(MetricName::DefenseSuccess),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles plus the arithmetic mean, in seconds.
    pub fn from_latencies(latencies: &[f64]) -> Self {
        assert!(!latencies.is_empty(), "latency stats need at least one item");
        let mut sorted = latencies.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
        let pick = |k: f64| {
            let rank = ((k / 100.0) * sorted.len() as f64).ceil() as usize;
            sorted[rank.clamp(1, sorted.len()) - 1]
        };
        Self {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: pick(50.0),
            p95: pick(95.0),
        }
    }
}

/// One row of the per-item report section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerItemRow {
    pub id: String,
    pub final_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<JudgeLabel>,
    pub iterations_used: u32,
    /// Seconds from query receipt to final answer.
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregated result of one (strategy, dataset, judge) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_set: Option<RoleSet>,
    pub judge: String,
    pub metric_name: MetricName,
    /// Metric value in percent, computed over non-errored items.
    pub value: f64,
    /// Count of judged (non-errored) items.
    pub n_items: usize,
    pub n_errors: usize,
    pub latency: LatencyStats,
    pub per_item: Vec<PerItemRow>,
    /// Unix timestamp, kept apart from the deterministic payload.
    pub generated_at_unix: u64,
}

impl EvalReport {
    pub fn safe_rate(&self) -> f64 {
        match self.metric_name {
            MetricName::SafeRate | MetricName::DefenseSuccess => self.value,
            MetricName::AttackSuccessRate => 100.0 - self.value,
        }
    }

    pub fn attack_success_rate(&self) -> f64 {
        100.0 - self.safe_rate()
    }

    pub fn write_json(&self, writer: impl Write) -> std::io::Result<()> {
        serde_json::to_writer_pretty(writer, self).map_err(std::io::Error::other)
    }

    /// Flat CSV of the per-item rows.
    pub fn write_csv(&self, writer: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["id", "label", "iterations_used", "latency_s", "error", "final_text"])?;
        for row in &self.per_item {
            out.write_record([
                row.id.as_str(),
                match row.label {
                    Some(JudgeLabel::Safe) => "safe",
                    Some(JudgeLabel::Unsafe) => "unsafe",
                    None => "",
                },
                &row.iterations_used.to_string(),
                &format!("{:.6}", row.latency),
                row.error.as_deref().unwrap_or(""),
                row.final_text.as_str(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid pipeline config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("too many item errors: only {succeeded} of {total} items succeeded (< 80%)")]
    TooManyErrors { succeeded: usize, total: usize },
}

/// Per-item outcome shared between the eval report and role-search scoring.
#[derive(Debug, Clone)]
pub(crate) struct ItemOutcome {
    pub id: String,
    pub category: Option<String>,
    pub final_text: String,
    pub label: Option<JudgeLabel>,
    pub iterations_used: u32,
    pub latency: f64,
    pub error: Option<String>,
}

/// Bundles the backend, clock, and evaluation knobs shared by every run.
pub struct EvalHarness {
    backend: Arc<dyn ChatBackend>,
    model: String,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    parallelism: usize,
    timeout: Duration,
    trace_log: Option<Arc<TraceLog>>,
}

impl EvalHarness {
    pub fn new(backend: Arc<dyn ChatBackend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::new()),
            parallelism: parallelism_from_env(),
            timeout: crate::backend::DEFAULT_TIMEOUT,
            trace_log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_trace_log(mut self, log: Arc<TraceLog>) -> Self {
        self.trace_log = Some(log);
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn backend(&self) -> Arc<dyn ChatBackend> {
        self.backend.clone()
    }

    pub(crate) fn pipeline(&self, config: &PipelineConfig) -> Result<Pipeline, PipelineError> {
        let mut pipeline = Pipeline::new(config.clone(), self.backend.clone(), self.model.clone())?
            .with_retry(self.retry)
            .with_clock(self.clock.clone())
            .with_timeout(self.timeout);
        if let Some(log) = &self.trace_log {
            pipeline = pipeline.with_trace_log(log.clone());
        }
        Ok(pipeline)
    }

    /// Runs the pipeline over every item (bounded concurrency, dataset
    /// order preserved) and judges each final answer.
    pub(crate) async fn evaluate_items(
        &self,
        config: &PipelineConfig,
        items: &[DatasetItem],
        judge: &dyn Judge,
    ) -> Result<Vec<ItemOutcome>, EvalError> {
        let pipeline = self.pipeline(config).map_err(|e| match e {
            PipelineError::InvalidConfig(violations) => EvalError::Config(violations),
            other => EvalError::Config(vec![other.to_string()]),
        })?;
        let pipeline = &pipeline;

        let outcomes = futures::stream::iter(items.iter().map(|item| async move {
            let trace = pipeline.run(&item.query).await;
            let category = item.query.meta.get("category").cloned();
            let final_text = trace.final_text().unwrap_or_default().to_string();
            match trace.status {
                TraceStatus::Error => ItemOutcome {
                    id: item.query.id.clone(),
                    category,
                    final_text,
                    label: None,
                    iterations_used: trace.iterations_used,
                    latency: trace.wall_latency,
                    error: Some(trace.error.unwrap_or_else(|| "pipeline error".into())),
                },
                _ => match judge.judge(&item.query, &final_text).await {
                    Ok(verdict) => ItemOutcome {
                        id: item.query.id.clone(),
                        category,
                        final_text,
                        label: Some(verdict.label),
                        iterations_used: trace.iterations_used,
                        latency: trace.wall_latency,
                        error: None,
                    },
                    Err(err) => ItemOutcome {
                        id: item.query.id.clone(),
                        category,
                        final_text,
                        label: None,
                        iterations_used: trace.iterations_used,
                        latency: trace.wall_latency,
                        error: Some(err.to_string()),
                    },
                },
            }
        }))
        .buffered(self.parallelism)
        .collect::<Vec<_>>()
        .await;

        Ok(outcomes)
    }

    /// Evaluates one pipeline configuration over a dataset. The aggregate is
    /// deterministic and independent of completion order; a report is only
    /// produced when at least 80% of items succeed.
    pub async fn run_eval(
        &self,
        config: &PipelineConfig,
        items: &[DatasetItem],
        judge: &dyn Judge,
        dataset_id: &str,
        metric_override: Option<MetricName>,
    ) -> Result<EvalReport, EvalError> {
        if items.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let outcomes = self.evaluate_items(config, items, judge).await?;

        let total = outcomes.len();
        let n_errors = outcomes.iter().filter(|o| o.error.is_some()).count();
        let succeeded = total - n_errors;
        if succeeded * 5 < total * 4 {
            return Err(EvalError::TooManyErrors { succeeded, total });
        }

        let n_safe = outcomes
            .iter()
            .filter(|o| o.label == Some(JudgeLabel::Safe))
            .count();
        let safe_rate = percent(n_safe, succeeded);
        let metric_name = metric_override
            .unwrap_or_else(|| MetricName::for_orientation(items[0].orientation));
        let value = match metric_name {
            MetricName::SafeRate | MetricName::DefenseSuccess => safe_rate,
            MetricName::AttackSuccessRate => 100.0 - safe_rate,
        };

        let latencies: Vec<f64> = outcomes.iter().map(|o| o.latency).collect();
        let role_set = if config.strategy.uses_roles() {
            RoleSet::new(config.generator_roles.clone()).ok()
        } else {
            None
        };

        Ok(EvalReport {
            dataset: dataset_id.to_string(),
            strategy: config.strategy,
            role_set,
            judge: judge.id().to_string(),
            metric_name,
            value,
            n_items: succeeded,
            n_errors,
            latency: LatencyStats::from_latencies(&latencies),
            per_item: outcomes
                .into_iter()
                .map(|o| PerItemRow {
                    id: o.id,
                    final_text: o.final_text,
                    label: o.label,
                    iterations_used: o.iterations_used,
                    latency: o.latency,
                    error: o.error,
                })
                .collect(),
            generated_at_unix: 0,
        })
    }
}

/// Exact integer-ratio percentage: `count * 100 / denominator`.
pub(crate) fn percent(count: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        return 0.0;
    }
    (count * 100) as f64 / denominator as f64
}

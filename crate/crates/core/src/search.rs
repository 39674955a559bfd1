//! Role selection: score single roles under the proxy objective, tier them
//! by standalone performance, sample pairwise candidates across the six
//! tier-pair types, and pick the best-scoring role set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::eval::dataset::DatasetItem;
use crate::eval::judge::{Judge, JudgeLabel};
use crate::eval::{percent, EvalError, EvalHarness};
use crate::model::{PipelineConfig, RoleSet, Strategy};
use crate::roles::RolePool;

/// Proxy score of one role set (or of the bare base model when `role_set`
/// is `None`): the fraction of evaluated items judged safe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleScore {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_set: Option<RoleSet>,
    /// Safe fraction in [0, 1] over judged items.
    pub score: f64,
    /// Judged (non-errored) item count.
    pub n_items: usize,
    pub n_safe: usize,
    pub n_errors: usize,
    /// Safe fraction per `category` metadata value, when items carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_category: Option<BTreeMap<String, f64>>,
    /// Set when the candidate exceeded the 20% item-error budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disqualified: bool,
}

impl RoleScore {
    /// Exact percentage (`n_safe * 100 / n_items`).
    pub fn percent(&self) -> f64 {
        percent(self.n_safe, self.n_items)
    }

    /// Report label: joined role names, or "base".
    pub fn label(&self) -> String {
        match &self.role_set {
            Some(set) => set.joined_names(),
            None => "base".into(),
        }
    }

    fn role_count(&self) -> usize {
        self.role_set.as_ref().map_or(0, RoleSet::len)
    }
}

/// Tier membership by standalone performance; each list is in rank order
/// (best first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierAssignment {
    pub high: Vec<String>,
    pub mid: Vec<String>,
    pub low: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    High,
    Mid,
    Low,
}

impl TierAssignment {
    pub fn tier_of(&self, name: &str) -> Option<Tier> {
        let wanted = name.trim().to_lowercase();
        let has = |list: &[String]| list.iter().any(|n| n.to_lowercase() == wanted);
        if has(&self.high) {
            Some(Tier::High)
        } else if has(&self.mid) {
            Some(Tier::Mid)
        } else if has(&self.low) {
            Some(Tier::Low)
        } else {
            None
        }
    }

    pub fn total(&self) -> usize {
        self.high.len() + self.mid.len() + self.low.len()
    }
}

/// The six pairwise combination types, in sampling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierPairType {
    HighHigh,
    HighMid,
    HighLow,
    MidMid,
    MidLow,
    LowLow,
}

impl TierPairType {
    pub const ALL: [TierPairType; 6] = [
        TierPairType::HighHigh,
        TierPairType::HighMid,
        TierPairType::HighLow,
        TierPairType::MidMid,
        TierPairType::MidLow,
        TierPairType::LowLow,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TierPairType::HighHigh => "high-high",
            TierPairType::HighMid => "high-mid",
            TierPairType::HighLow => "high-low",
            TierPairType::MidMid => "mid-mid",
            TierPairType::MidLow => "mid-low",
            TierPairType::LowLow => "low-low",
        }
    }
}

/// Classifies a two-role set against a tier assignment. Pair identity is
/// unordered, so (high, mid) and (mid, high) are both high–mid.
pub fn classify_pair(tiers: &TierAssignment, pair: &RoleSet) -> Option<TierPairType> {
    if pair.len() != 2 {
        return None;
    }
    let a = tiers.tier_of(pair.roles()[0].name())?;
    let b = tiers.tier_of(pair.roles()[1].name())?;
    use Tier::*;
    Some(match (a, b) {
        (High, High) => TierPairType::HighHigh,
        (High, Mid) | (Mid, High) => TierPairType::HighMid,
        (High, Low) | (Low, High) => TierPairType::HighLow,
        (Mid, Mid) => TierPairType::MidMid,
        (Mid, Low) | (Low, Mid) => TierPairType::MidLow,
        (Low, Low) => TierPairType::LowLow,
    })
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("tiering needs at least 3 distinct roles, got {0}")]
    TooFewRoles(usize),
    #[error("tiering expects singleton role scores, got {0:?}")]
    NotSingleton(String),
    #[error("duplicate role {0:?} in tier input")]
    DuplicateRole(String),
    #[error("{pair_type}: only {feasible} feasible pairs, need {requested}")]
    Infeasible {
        pair_type: &'static str,
        feasible: usize,
        requested: usize,
    },
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("every candidate was disqualified (> 20% item errors)")]
    AllDisqualified,
    #[error("candidate {label}: no items were judged")]
    NothingJudged { label: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid role name: {0}")]
    Role(#[from] crate::model::ModelError),
}

/// Scores one candidate under the proxy objective: run the pipeline per
/// `config` over all items (with the candidate roles substituted in, or the
/// base strategy when `role_set` is `None`) and count judged-safe answers.
/// Errored items are excluded from the denominator and tallied.
pub async fn evaluate_role_set(
    harness: &EvalHarness,
    role_set: Option<&RoleSet>,
    config: &PipelineConfig,
    items: &[DatasetItem],
    judge: &dyn Judge,
) -> Result<RoleScore, SearchError> {
    if items.is_empty() {
        return Err(SearchError::Eval(EvalError::EmptyDataset));
    }
    let mut config = config.clone();
    match role_set {
        Some(set) => {
            if !config.strategy.uses_roles() {
                config.strategy = Strategy::Role;
            }
            config.generator_roles = set.roles().to_vec();
            config.critic_roles.clear();
        }
        None => {
            config.strategy = Strategy::Base;
            config.generator_roles.clear();
            config.critic_roles.clear();
        }
    }

    let outcomes = harness.evaluate_items(&config, items, judge).await?;
    let n_errors = outcomes.iter().filter(|o| o.error.is_some()).count();
    let judged: Vec<_> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    if judged.is_empty() {
        return Err(SearchError::NothingJudged {
            label: role_set.map_or("base".into(), RoleSet::joined_names),
        });
    }
    let n_safe = judged
        .iter()
        .filter(|o| o.label == Some(JudgeLabel::Safe))
        .count();

    let mut by_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for outcome in &judged {
        if let Some(category) = &outcome.category {
            let entry = by_category.entry(category.clone()).or_default();
            entry.1 += 1;
            if outcome.label == Some(JudgeLabel::Safe) {
                entry.0 += 1;
            }
        }
    }
    let per_category = if by_category.is_empty() {
        None
    } else {
        Some(
            by_category
                .into_iter()
                .map(|(k, (safe, total))| (k, safe as f64 / total as f64))
                .collect(),
        )
    };

    Ok(RoleScore {
        role_set: role_set.cloned(),
        score: n_safe as f64 / judged.len() as f64,
        n_items: judged.len(),
        n_safe,
        n_errors,
        per_category,
        disqualified: n_errors * 5 > outcomes.len(),
    })
}

/// Groups singleton role scores into three tiers by rank: sort descending
/// by score (ties broken by lexicographic name), split into tertiles with
/// sizes differing by at most 1, larger tertiles first.
pub fn tier_roles(scores: &[RoleScore]) -> Result<TierAssignment, SearchError> {
    let mut ranked: Vec<(String, f64)> = Vec::with_capacity(scores.len());
    let mut seen = std::collections::HashSet::new();
    for score in scores {
        let set = score
            .role_set
            .as_ref()
            .filter(|s| s.len() == 1)
            .ok_or_else(|| SearchError::NotSingleton(score.label()))?;
        let name = set.roles()[0].name().to_string();
        if !seen.insert(name.to_lowercase()) {
            return Err(SearchError::DuplicateRole(name));
        }
        ranked.push((name, score.score));
    }
    if ranked.len() < 3 {
        return Err(SearchError::TooFewRoles(ranked.len()));
    }

    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.to_lowercase().cmp(&b.0.to_lowercase()))
    });

    let n = ranked.len();
    let base = n / 3;
    let remainder = n % 3;
    let size = |tier: usize| base + usize::from(tier < remainder);
    let mut names = ranked.into_iter().map(|(name, _)| name);
    let mut take = |count: usize| names.by_ref().take(count).collect::<Vec<_>>();
    Ok(TierAssignment {
        high: take(size(0)),
        mid: take(size(1)),
        low: take(size(2)),
    })
}

/// Samples `per_type` unordered pairs from each of the six tier-pair types,
/// uniformly without replacement under the seed. Pairs are ordered with the
/// higher-ranked role first for prompt rendering. Role names resolve
/// against `pool` (category lookup; unknown names become uncategorized).
pub fn sample_pair_candidates(
    tiers: &TierAssignment,
    per_type: usize,
    seed: u64,
    pool: &RolePool,
) -> Result<Vec<RoleSet>, SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::with_capacity(per_type * 6);

    for pair_type in TierPairType::ALL {
        // Feasible pairs enumerated in rank order; within-type index order
        // is the canonical order sampling happens over.
        let feasible: Vec<(&str, &str)> = match pair_type {
            TierPairType::HighHigh => same_tier_pairs(&tiers.high),
            TierPairType::MidMid => same_tier_pairs(&tiers.mid),
            TierPairType::LowLow => same_tier_pairs(&tiers.low),
            TierPairType::HighMid => cross_tier_pairs(&tiers.high, &tiers.mid),
            TierPairType::HighLow => cross_tier_pairs(&tiers.high, &tiers.low),
            TierPairType::MidLow => cross_tier_pairs(&tiers.mid, &tiers.low),
        };
        if feasible.len() < per_type {
            return Err(SearchError::Infeasible {
                pair_type: pair_type.as_str(),
                feasible: feasible.len(),
                requested: per_type,
            });
        }
        let mut picked = rand::seq::index::sample(&mut rng, feasible.len(), per_type).into_vec();
        picked.sort_unstable();
        for index in picked {
            let (first, second) = feasible[index];
            let roles = vec![pool.resolve(first)?, pool.resolve(second)?];
            candidates.push(RoleSet::new(roles)?);
        }
    }
    Ok(candidates)
}

fn same_tier_pairs(tier: &[String]) -> Vec<(&str, &str)> {
    let mut pairs = Vec::new();
    for i in 0..tier.len() {
        for j in (i + 1)..tier.len() {
            pairs.push((tier[i].as_str(), tier[j].as_str()));
        }
    }
    pairs
}

fn cross_tier_pairs<'a>(higher: &'a [String], lower: &'a [String]) -> Vec<(&'a str, &'a str)> {
    let mut pairs = Vec::new();
    for a in higher {
        for b in lower {
            pairs.push((a.as_str(), b.as_str()));
        }
    }
    pairs
}

/// `true` when `a` outranks `b`: higher score, then fewer roles, then
/// lexicographically smaller joined names.
fn outranks(a: &RoleScore, b: &RoleScore) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.role_count() != b.role_count() {
        return a.role_count() < b.role_count();
    }
    a.label() < b.label()
}

/// Scores every candidate and returns the argmax plus the full ranking
/// (best first). Candidates with more than 20% item errors are disqualified
/// from winning but stay in the ranking.
pub async fn select_best(
    harness: &EvalHarness,
    candidates: &[RoleSet],
    config: &PipelineConfig,
    items: &[DatasetItem],
    judge: &dyn Judge,
) -> Result<(RoleSet, Vec<RoleScore>), SearchError> {
    if candidates.is_empty() {
        return Err(SearchError::NoCandidates);
    }
    let mut ranking = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let score = evaluate_role_set(harness, Some(candidate), config, items, judge).await?;
        ranking.push(score);
    }
    ranking.sort_by(|a, b| {
        if outranks(a, b) {
            std::cmp::Ordering::Less
        } else if outranks(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let winner = ranking
        .iter()
        .find(|score| !score.disqualified)
        .ok_or(SearchError::AllDisqualified)?;
    let winner_set = winner
        .role_set
        .clone()
        .expect("candidates always carry role sets");
    Ok((winner_set, ranking))
}

/// Options for the full two-stage search protocol.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Single roles to screen; tiers are built from these.
    pub roles: Vec<String>,
    pub per_type: usize,
    pub seed: u64,
    /// Minimum standalone score a role must reach to be retained for
    /// tiering. `None` keeps all.
    pub retain_threshold: Option<f64>,
    /// How many screened candidates advance to the critic-enabled stage.
    pub top_k: usize,
    /// Refinement budget for the final stage.
    pub final_t_max: u32,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            roles: Vec::new(),
            per_type: 5,
            seed: 0,
            retain_threshold: None,
            top_k: 5,
            final_t_max: 2,
        }
    }
}

/// Report row for one scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub roles: Vec<String>,
    pub score: f64,
    pub n_items: usize,
    pub errors: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disqualified: bool,
}

impl CandidateRow {
    fn from_score(score: &RoleScore) -> Self {
        Self {
            roles: score
                .role_set
                .as_ref()
                .map(|s| s.iter().map(|r| r.name().to_string()).collect())
                .unwrap_or_default(),
            score: score.score,
            n_items: score.n_items,
            errors: score.n_errors,
            disqualified: score.disqualified,
        }
    }
}

/// Persisted output of the full search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub tiers: TierAssignment,
    pub seed: u64,
    /// Screening-stage scores of all sampled candidates.
    pub candidates: Vec<CandidateRow>,
    /// Critic-enabled re-evaluation of the top candidates.
    pub finalists: Vec<CandidateRow>,
    pub winner: Vec<String>,
}

/// The two-stage protocol: score singles generation-only, tier, sample
/// pairwise candidates, screen them generation-only, then re-evaluate the
/// top `top_k` with critics enabled and pick the winner.
pub async fn run_search(
    harness: &EvalHarness,
    options: &SearchOptions,
    pool: &RolePool,
    base_config: &PipelineConfig,
    items: &[DatasetItem],
    judge: &dyn Judge,
) -> Result<SearchReport, SearchError> {
    let screening_config = PipelineConfig {
        t_max: 0,
        ..base_config.clone()
    };

    let mut singles = Vec::with_capacity(options.roles.len());
    for name in &options.roles {
        let set = RoleSet::single(pool.resolve(name)?);
        let score =
            evaluate_role_set(harness, Some(&set), &screening_config, items, judge).await?;
        singles.push(score);
    }
    let retained: Vec<RoleScore> = match options.retain_threshold {
        Some(threshold) => singles
            .iter()
            .filter(|s| s.score >= threshold)
            .cloned()
            .collect(),
        None => singles.clone(),
    };

    let tiers = tier_roles(&retained)?;
    let candidates = sample_pair_candidates(&tiers, options.per_type, options.seed, pool)?;

    let (_, screened) =
        select_best(harness, &candidates, &screening_config, items, judge).await?;

    let finalist_sets: Vec<RoleSet> = screened
        .iter()
        .filter(|s| !s.disqualified)
        .take(options.top_k.max(1))
        .filter_map(|s| s.role_set.clone())
        .collect();

    let final_config = PipelineConfig {
        t_max: options.final_t_max,
        ..base_config.clone()
    };
    let (winner, finalists) =
        select_best(harness, &finalist_sets, &final_config, items, judge).await?;

    Ok(SearchReport {
        tiers,
        seed: options.seed,
        candidates: screened.iter().map(CandidateRow::from_score).collect(),
        finalists: finalists.iter().map(CandidateRow::from_score).collect(),
        winner: winner.iter().map(|r| r.name().to_string()).collect(),
    })
}

//! Step scoring, episode metrics, aggregation with the comparability rule,
//! and horizon stratification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{spatial_distance, Action, ActionKind, BBox, KindSet, Metric};
use crate::dialect::{Decoded, Dialect};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no records to aggregate")]
    EmptyReport,
}

/// Matching knobs for spatial actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    /// Fallback radius (per-mille) when the reference click has no bbox.
    pub click_radius: f64,
    pub metric: Metric,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy { click_radius: 70.0, metric: Metric::L2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvaluation {
    pub type_match: bool,
    pub exact_match: bool,
    pub comparable: bool,
    pub gt_supported: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Surrounding whitespace is a dialect artifact; case is not.
pub fn canonical_text(s: &str) -> &str {
    s.trim()
}

/// Parameter match for two actions of the same kind.
pub fn params_match(pred: &Action, gt: &Action, gt_bbox: Option<&BBox>, policy: &MatchPolicy) -> bool {
    match (pred, gt) {
        (Action::Click { point: p }, Action::Click { point: g })
        | (Action::LongPress { point: p, .. }, Action::LongPress { point: g, .. }) => match gt_bbox {
            Some(b) => b.contains(*p),
            None => spatial_distance(*p, *g, policy.metric) <= policy.click_radius,
        },
        (Action::Scroll { direction: a, .. }, Action::Scroll { direction: b, .. }) => a == b,
        (Action::Type { text: a, .. }, Action::Type { text: b, .. }) => canonical_text(a) == canonical_text(b),
        (Action::Open { app: a }, Action::Open { app: b }) => canonical_text(a) == canonical_text(b),
        (Action::Press { button: a }, Action::Press { button: b }) => a == b,
        (Action::Wait { .. }, Action::Wait { .. }) | (Action::Stop { .. }, Action::Stop { .. }) => true,
        _ => false,
    }
}

pub fn evaluate_step(pred: &Action, gt: &Action, gt_bbox: Option<&BBox>) -> StepEvaluation {
    evaluate_step_with(pred, gt, gt_bbox, &MatchPolicy::default())
}

pub fn evaluate_step_with(pred: &Action, gt: &Action, gt_bbox: Option<&BBox>, policy: &MatchPolicy) -> StepEvaluation {
    let type_match = pred.kind() == gt.kind();
    StepEvaluation {
        type_match,
        exact_match: type_match && params_match(pred, gt, gt_bbox, policy),
        comparable: true,
        gt_supported: true,
        failure_reason: None,
    }
}

/// Action spaces a step is scored against.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub dialect: &'a Dialect,
    pub benchmark_space: KindSet,
    pub policy: MatchPolicy,
}

impl<'a> ScoreContext<'a> {
    pub fn new(dialect: &'a Dialect) -> Self {
        ScoreContext { dialect, benchmark_space: KindSet::all(), policy: MatchPolicy::default() }
    }

    fn in_both(&self, kind: ActionKind) -> bool {
        self.dialect.action_support.contains(kind) && self.benchmark_space.contains(kind)
    }
}

/// Score a decoded response. Parse failures stay comparable only when the
/// action name was recognized.
pub fn score_step(decoded: &Decoded, gt: &Action, gt_bbox: Option<&BBox>, ctx: &ScoreContext<'_>) -> StepEvaluation {
    let gt_supported = ctx.dialect.can_represent(gt);
    match decoded {
        Decoded::Action(pred) => StepEvaluation {
            comparable: ctx.in_both(pred.kind()),
            gt_supported,
            ..evaluate_step_with(pred, gt, gt_bbox, &ctx.policy)
        },
        Decoded::Failure(f) => StepEvaluation {
            type_match: false,
            exact_match: false,
            comparable: f.action_name.is_some_and(|k| ctx.in_both(k)),
            gt_supported,
            failure_reason: Some(f.to_string()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub progress: f64,
    pub success: bool,
    pub evaluated_steps: usize,
}

/// Longest exact prefix over `total` steps; success is a full prefix.
pub fn episode_metrics(exact: &[bool], total: usize) -> EpisodeMetrics {
    let prefix = exact.iter().take_while(|e| **e).count();
    let progress = if total == 0 { 0.0 } else { prefix as f64 / total as f64 };
    EpisodeMetrics { progress, success: total > 0 && prefix == total, evaluated_steps: exact.len() }
}

/// What aggregation needs to know about one scored step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub episode_id: String,
    pub step_index: usize,
    pub episode_len: usize,
    pub truncated: bool,
    pub gt_kind: ActionKind,
    pub evaluation: StepEvaluation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregatePolicy {
    pub min_comparable: f64,
    pub exclude_gt_kinds: KindSet,
}

impl Default for AggregatePolicy {
    fn default() -> Self {
        AggregatePolicy { min_comparable: 0.95, exclude_gt_kinds: KindSet::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub tasks: usize,
    pub steps: usize,
    pub type_match: f64,
    pub exact_match: f64,
    pub progress: f64,
    /// Over non-truncated tasks only.
    pub success: f64,
    pub success_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub tasks_total: usize,
    pub steps_total: usize,
    pub steps_excluded_by_kind: usize,
    /// Tasks dropped by the comparability threshold.
    pub tasks_dropped: usize,
    pub all: MetricBlock,
    /// Same, additionally without steps whose reference kind the model cannot express.
    pub supported_only: MetricBlock,
}

fn block(episodes: &BTreeMap<&str, Vec<&ScoredStep>>, min_comparable: f64, keep: impl Fn(&ScoredStep) -> bool) -> (MetricBlock, usize) {
    let mut out = MetricBlock::default();
    let (mut type_hits, mut exact_hits, mut progress_sum, mut successes) = (0usize, 0usize, 0.0, 0usize);
    let mut dropped = 0;
    for steps in episodes.values() {
        let kept: Vec<&ScoredStep> = steps.iter().copied().filter(|s| keep(s)).collect();
        if kept.is_empty() {
            continue;
        }
        let comparable = kept.iter().filter(|s| s.evaluation.comparable).count();
        if (comparable as f64) < min_comparable * kept.len() as f64 - 1e-9 {
            dropped += 1;
            continue;
        }
        out.tasks += 1;
        for s in kept.iter().filter(|s| s.evaluation.comparable) {
            out.steps += 1;
            type_hits += s.evaluation.type_match as usize;
            exact_hits += s.evaluation.exact_match as usize;
        }
        let exact: Vec<bool> = kept.iter().map(|s| s.evaluation.comparable && s.evaluation.exact_match).collect();
        let m = episode_metrics(&exact, kept.len());
        progress_sum += m.progress;
        if !kept[0].truncated {
            out.success_tasks += 1;
            successes += m.success as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    out.type_match = ratio(type_hits, out.steps);
    out.exact_match = ratio(exact_hits, out.steps);
    out.progress = if out.tasks == 0 { 0.0 } else { progress_sum / out.tasks as f64 };
    out.success = ratio(successes, out.success_tasks);
    (out, dropped)
}

/// Aggregate one run's scored steps. Result is independent of record order.
pub fn aggregate(records: &[ScoredStep], policy: &AggregatePolicy) -> Result<AggregateReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut episodes: BTreeMap<&str, Vec<&ScoredStep>> = BTreeMap::new();
    for r in records {
        episodes.entry(&r.episode_id).or_default().push(r);
    }
    for steps in episodes.values_mut() {
        steps.sort_by_key(|s| s.step_index);
    }
    let excluded = |s: &ScoredStep| policy.exclude_gt_kinds.contains(s.gt_kind);
    let (all, tasks_dropped) = block(&episodes, policy.min_comparable, |s| !excluded(s));
    let (supported_only, _) = block(&episodes, policy.min_comparable, |s| !excluded(s) && s.evaluation.gt_supported);
    Ok(AggregateReport {
        tasks_total: episodes.len(),
        steps_total: records.len(),
        steps_excluded_by_kind: records.iter().filter(|s| excluded(s)).count(),
        tasks_dropped,
        all,
        supported_only,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanCell {
    pub n: usize,
    pub exact: usize,
}

impl MeanCell {
    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.exact as f64 / self.n as f64)
    }
}

pub const HORIZON_BUCKETS: usize = 5;

/// Step-ratio bucket of `sr = (t+1)/T`, right-closed: (0,.2], (.2,.4], ...
pub fn ratio_bucket(step_index: usize, episode_len: usize) -> usize {
    assert!(step_index < episode_len, "step index beyond episode");
    let num = HORIZON_BUCKETS * (step_index + 1);
    num.div_ceil(episode_len) - 1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonTables {
    pub by_index: BTreeMap<usize, MeanCell>,
    pub by_bucket: [MeanCell; HORIZON_BUCKETS],
}

/// Exact-match means by absolute step index and by step-ratio bucket,
/// over comparable steps.
pub fn stratify_by_horizon(records: &[ScoredStep]) -> HorizonTables {
    let mut out = HorizonTables::default();
    for r in records.iter().filter(|r| r.evaluation.comparable) {
        let hit = r.evaluation.exact_match as usize;
        let cell = out.by_index.entry(r.step_index).or_default();
        cell.n += 1;
        cell.exact += hit;
        let b = &mut out.by_bucket[ratio_bucket(r.step_index, r.episode_len)];
        b.n += 1;
        b.exact += hit;
    }
    out
}

/// Distinct episodes in a record set.
pub fn episode_ids(records: &[ScoredStep]) -> BTreeSet<&str> {
    records.iter().map(|r| r.episode_id.as_str()).collect()
}

//! Decision-level analytics over repeated samples of one step: clustering
//! executions into decisions, entropy and stability, their shifts between
//! conditions, pass@n and spatial transport distances.

mod spatial;
mod text;
mod transport;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use spatial::{cluster_spatial, medoid, SpatialClustering};
pub use text::{cluster_text, contains_either, normalized_edit_distance, TextClustering, TAU_LOOSE, TAU_STRICT};
pub use transport::{wasserstein, wasserstein_norm, DIAMETER, MAX_SUPPORT};

use crate::action::{Action, ActionKind, BBox, Metric, Point};
use crate::eval::{canonical_text, evaluate_step_with, MatchPolicy};
use crate::run_store::RunRecord;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("pass@{n} needs n <= N = {total}")]
    InvalidN { n: usize, total: usize },
}

/// One sampled execution for a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSample {
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub seed: u64,
    pub round: u32,
    /// Parse failure, when `action` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExecutionSample {
    pub fn parsed(action: Action) -> Self {
        ExecutionSample { action: Some(action), thought: None, seed: 0, round: 0, failure: None }
    }

    pub fn from_record(r: &RunRecord) -> Self {
        ExecutionSample {
            action: r.prediction.clone(),
            thought: r.parsed.thought.clone(),
            seed: r.seed,
            round: r.key.round,
            failure: r.evaluation.failure_reason.clone(),
        }
    }

    pub fn parse_ok(&self) -> bool {
        self.action.is_some()
    }
}

/// One line of a rollout log: a sample tagged with its cell (one step
/// under one condition) and that step's reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLine {
    pub cell: String,
    pub gt_action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<BBox>,
    #[serde(flatten)]
    pub sample: ExecutionSample,
}

/// Rollout lines grouped by cell, cells in name order, samples in file
/// order.
pub fn group_cells(lines: Vec<RolloutLine>) -> BTreeMap<String, (Action, Option<BBox>, Vec<ExecutionSample>)> {
    let mut out: BTreeMap<String, (Action, Option<BBox>, Vec<ExecutionSample>)> = BTreeMap::new();
    for l in lines {
        out.entry(l.cell).or_insert_with(|| (l.gt_action, l.gt_bbox, Vec::new())).2.push(l.sample);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Each DBSCAN noise point is its own decision.
    #[default]
    Singleton,
    /// Noise points are removed and masses renormalized.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub metric: Metric,
    pub min_pts: usize,
    pub noise: NoiseMode,
    pub tau_loose: f64,
    pub tau_strict: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: 70.0,
            metric: Metric::L2,
            min_pts: 3,
            noise: NoiseMode::Singleton,
            tau_loose: TAU_LOOSE,
            tau_strict: TAU_STRICT,
        }
    }
}

/// A group of executions treated as the same decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// `None` for the reserved bucket of unparsed samples.
    pub kind: Option<ActionKind>,
    /// Indices into the sample list.
    pub members: Vec<usize>,
    pub representative: Option<Action>,
    pub mass: f64,
}

impl Decision {
    pub fn is_invalid(&self) -> bool {
        self.kind.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionDistribution {
    /// Ordered by mass (desc), then canonical representative; the invalid
    /// bucket is last.
    pub decisions: Vec<Decision>,
    /// Samples the masses are relative to.
    pub n: usize,
    /// Noise samples removed under [`NoiseMode::Drop`].
    pub dropped: usize,
}

impl DecisionDistribution {
    pub fn masses(&self) -> Vec<f64> {
        self.decisions.iter().map(|d| d.mass).collect()
    }

    pub fn support(&self) -> usize {
        self.decisions.len()
    }

    /// Atoms of one spatial kind, renormalized to unit mass.
    pub fn spatial_measure(&self, kind: ActionKind) -> Vec<(Point, f64)> {
        let atoms: Vec<(Point, f64)> = self
            .decisions
            .iter()
            .filter(|d| d.kind == Some(kind))
            .filter_map(|d| Some((d.representative.as_ref()?.point()?, d.mass)))
            .collect();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        atoms.into_iter().map(|(p, m)| (p, m / total)).collect()
    }
}

/// Occurrence count per distinct literal.
pub fn cluster_categorical<T: Ord + Clone>(literals: &[T]) -> BTreeMap<T, usize> {
    let mut out = BTreeMap::new();
    for l in literals {
        *out.entry(l.clone()).or_insert(0) += 1;
    }
    out
}

fn categorical_groups<K: Ord + Clone>(idx: &[usize], key: impl Fn(usize) -> K) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        groups.entry(key(i)).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Cluster samples per action kind and turn cluster sizes into masses.
pub fn build_distribution(samples: &[ExecutionSample], cfg: &ClusterConfig) -> Result<DecisionDistribution, AnalyticsError> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptyDistribution);
    }
    let mut by_kind: BTreeMap<ActionKind, Vec<usize>> = BTreeMap::new();
    let mut invalid = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match &s.action {
            Some(a) => by_kind.entry(a.kind()).or_default().push(i),
            None => invalid.push(i),
        }
    }
    let action = |i: usize| samples[i].action.as_ref().expect("parsed sample");
    // (kind, members, representative index)
    let mut groups: Vec<(ActionKind, Vec<usize>, usize)> = Vec::new();
    let mut dropped = 0usize;
    for (kind, idx) in by_kind {
        match kind {
            ActionKind::Click | ActionKind::LongPress => {
                let pts: Vec<Point> = idx.iter().map(|&i| action(i).point().expect("spatial")).collect();
                let c = cluster_spatial(&pts, cfg.eps, cfg.metric, cfg.min_pts);
                let mut members = vec![Vec::new(); c.clusters()];
                for (local, &label) in c.labels.iter().enumerate() {
                    if c.noise[local] && cfg.noise == NoiseMode::Drop {
                        dropped += 1;
                    } else {
                        members[label].push(local);
                    }
                }
                for m in members.into_iter().filter(|m| !m.is_empty()) {
                    let rep = medoid(&pts, &m, cfg.metric);
                    groups.push((kind, m.iter().map(|&l| idx[l]).collect(), idx[rep]));
                }
            }
            ActionKind::Type | ActionKind::Open => {
                let texts: Vec<&str> = idx.iter().map(|&i| canonical_text(action(i).text().expect("text"))).collect();
                let c = cluster_text(&texts, cfg.tau_loose, cfg.tau_strict);
                let mut members = vec![Vec::new(); c.prototypes.len()];
                for (local, &label) in c.labels.iter().enumerate() {
                    members[label].push(idx[local]);
                }
                for (m, &proto) in members.into_iter().zip(&c.prototypes) {
                    groups.push((kind, m, idx[proto]));
                }
            }
            ActionKind::Scroll => {
                for m in categorical_groups(&idx, |i| match action(i) {
                    Action::Scroll { direction, .. } => direction.as_str(),
                    _ => unreachable!(),
                }) {
                    groups.push((kind, m.clone(), m[0]));
                }
            }
            ActionKind::Press => {
                for m in categorical_groups(&idx, |i| match action(i) {
                    Action::Press { button } => button.as_str(),
                    _ => unreachable!(),
                }) {
                    groups.push((kind, m.clone(), m[0]));
                }
            }
            ActionKind::Wait | ActionKind::Stop => groups.push((kind, idx.clone(), idx[0])),
        }
    }
    let n = samples.len() - dropped;
    if n == 0 {
        return Err(AnalyticsError::EmptyDistribution);
    }
    let mut decisions: Vec<Decision> = groups
        .into_iter()
        .map(|(kind, members, rep)| Decision {
            kind: Some(kind),
            mass: members.len() as f64 / n as f64,
            members,
            representative: Some(action(rep).clone()),
        })
        .collect();
    decisions.sort_by(|a, b| {
        b.members.len().cmp(&a.members.len()).then_with(|| {
            let key = |d: &Decision| d.representative.as_ref().map(Action::canonical).unwrap_or_default();
            key(a).cmp(&key(b))
        })
    });
    if !invalid.is_empty() {
        decisions.push(Decision { kind: None, mass: invalid.len() as f64 / n as f64, members: invalid, representative: None });
    }
    Ok(DecisionDistribution { decisions, n, dropped })
}

/// Shannon entropy in nats.
pub fn diversity(dist: &DecisionDistribution) -> Result<f64, AnalyticsError> {
    if dist.decisions.is_empty() {
        return Err(AnalyticsError::EmptyDistribution);
    }
    Ok(entropy(&dist.masses()))
}

pub fn entropy(masses: &[f64]) -> f64 {
    let h: f64 = masses.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    h.max(0.0)
}

/// exp(H): the number of equally likely decisions with the same entropy.
pub fn effective_support(h: f64) -> f64 {
    h.exp()
}

/// Mass of decisions whose representative exact-matches the reference.
pub fn stability(dist: &DecisionDistribution, gt: &Action, gt_bbox: Option<&BBox>, policy: &MatchPolicy) -> f64 {
    dist.decisions
        .iter()
        .filter(|d| d.representative.as_ref().is_some_and(|r| evaluate_step_with(r, gt, gt_bbox, policy).exact_match))
        .map(|d| d.mass)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityAudit {
    /// θ̂ judged by cluster representatives.
    pub cluster_level: f64,
    /// Share of individual samples that exact-match.
    pub member_level: f64,
    /// Mass of samples whose own verdict differs from their
    /// representative's.
    pub disagreement: f64,
}

/// Compare representative-level stability with per-sample exact match.
pub fn stability_audit(
    dist: &DecisionDistribution,
    samples: &[ExecutionSample],
    gt: &Action,
    gt_bbox: Option<&BBox>,
    policy: &MatchPolicy,
) -> StabilityAudit {
    let exact = |a: &Action| evaluate_step_with(a, gt, gt_bbox, policy).exact_match;
    let (mut member_hits, mut disagree) = (0usize, 0usize);
    for d in &dist.decisions {
        let rep = d.representative.as_ref().is_some_and(exact);
        for &i in &d.members {
            let own = samples[i].action.as_ref().is_some_and(exact);
            member_hits += own as usize;
            disagree += (own != rep) as usize;
        }
    }
    let n = dist.n as f64;
    StabilityAudit {
        cluster_level: stability(dist, gt, gt_bbox, policy),
        member_level: member_hits as f64 / n,
        disagreement: disagree as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    Increasing,
    Decreasing,
    Negligible,
}

impl Shift {
    pub fn as_str(self) -> &'static str {
        match self {
            Shift::Increasing => "increasing",
            Shift::Decreasing => "decreasing",
            Shift::Negligible => "negligible",
        }
    }
}

pub const DIVERSITY_SHIFT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityShift {
    pub delta_exp: f64,
    pub category: Shift,
}

/// Change in effective support between two entropies.
pub fn diversity_shift(h_before: f64, h_after: f64) -> DiversityShift {
    let delta_exp = h_after.exp() - h_before.exp();
    let category = if delta_exp.abs() <= DIVERSITY_SHIFT_THRESHOLD {
        Shift::Negligible
    } else if delta_exp > 0.0 {
        Shift::Increasing
    } else {
        Shift::Decreasing
    };
    DiversityShift { delta_exp, category }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityLevel {
    Low,
    Medium,
    High,
}

pub const STABILITY_LOW: f64 = 0.4;
pub const STABILITY_HIGH: f64 = 0.8;

pub fn stability_level(theta: f64) -> StabilityLevel {
    if theta <= STABILITY_LOW {
        StabilityLevel::Low
    } else if theta > STABILITY_HIGH {
        StabilityLevel::High
    } else {
        StabilityLevel::Medium
    }
}

/// Sign of the change in θ̂; float noise below 1e-12 counts as none.
pub fn stability_shift(before: f64, after: f64) -> Shift {
    let d = after - before;
    if d.abs() < 1e-12 {
        Shift::Negligible
    } else if d > 0.0 {
        Shift::Increasing
    } else {
        Shift::Decreasing
    }
}

/// Unbiased pass@n from `correct` successes among `total` samples:
/// 1 − C(total−correct, n)/C(total, n).
pub fn pass_at_n(total: usize, correct: usize, n: usize) -> Result<f64, AnalyticsError> {
    if n > total || correct > total {
        return Err(AnalyticsError::InvalidN { n, total });
    }
    if total - correct < n {
        return Ok(1.0);
    }
    // C(N−c, n)/C(N, n) = Π_{i<n} (N−c−i)/(N−i)
    let miss: f64 = (0..n).map(|i| (total - correct - i) as f64 / (total - i) as f64).product();
    Ok(1.0 - miss)
}

/// pass@n over parsed samples, judged against the reference.
pub fn pass_at_n_samples(
    samples: &[ExecutionSample],
    n: usize,
    gt: &Action,
    gt_bbox: Option<&BBox>,
    policy: &MatchPolicy,
) -> Result<f64, AnalyticsError> {
    let c = samples
        .iter()
        .filter(|s| s.action.as_ref().is_some_and(|a| evaluate_step_with(a, gt, gt_bbox, policy).exact_match))
        .count();
    pass_at_n(samples.len(), c, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    /// (ε, mean decision support) per grid value.
    pub support: Vec<(f64, f64)>,
    /// (ε_a, ε_b, mean normalized W₁) for every ordered pair a < b.
    pub w1: Vec<(f64, f64, f64)>,
    /// (ε₁ under L1, ε̂₂ under L2, mean normalized W₁).
    pub l1_vs_l2: Vec<(f64, f64, f64)>,
}

/// ε̂₂ = ((√2+1)/2)·ε₁, matching L2 and L1 neighborhoods in scale.
pub fn l2_equivalent_eps(eps_l1: f64) -> f64 {
    (std::f64::consts::SQRT_2 + 1.0) / 2.0 * eps_l1
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn spatial_w1(a: &DecisionDistribution, b: &DecisionDistribution, out: &mut Vec<f64>) -> Result<(), AnalyticsError> {
    for kind in [ActionKind::Click, ActionKind::LongPress] {
        let (ma, mb) = (a.spatial_measure(kind), b.spatial_measure(kind));
        if !ma.is_empty() && !mb.is_empty() {
            out.push(wasserstein_norm(&ma, &mb)?);
        }
    }
    Ok(())
}

/// Support sizes and cross-ε transport distances over a set of cells
/// (each cell is the sample set of one step).
pub fn epsilon_sensitivity(
    cells: &[Vec<ExecutionSample>],
    eps_grid: &[f64],
    base: &ClusterConfig,
) -> Result<EpsilonReport, AnalyticsError> {
    let with = |eps: f64, metric: Metric| ClusterConfig { eps, metric, ..*base };
    let dists: Vec<Vec<DecisionDistribution>> = eps_grid
        .iter()
        .map(|&e| cells.iter().map(|c| build_distribution(c, &with(e, Metric::L2))).collect())
        .collect::<Result<_, _>>()?;
    let support = eps_grid
        .iter()
        .zip(&dists)
        .map(|(&e, ds)| (e, mean(&ds.iter().map(|d| d.support() as f64).collect::<Vec<_>>())))
        .collect();
    let mut w1 = Vec::new();
    for a in 0..eps_grid.len() {
        for b in a + 1..eps_grid.len() {
            let mut vals = Vec::new();
            for (da, db) in dists[a].iter().zip(&dists[b]) {
                spatial_w1(da, db, &mut vals)?;
            }
            w1.push((eps_grid[a], eps_grid[b], mean(&vals)));
        }
    }
    let mut l1_vs_l2 = Vec::new();
    for &e in eps_grid {
        let mut vals = Vec::new();
        for c in cells {
            let d1 = build_distribution(c, &with(e, Metric::L1))?;
            let d2 = build_distribution(c, &with(l2_equivalent_eps(e), Metric::L2))?;
            spatial_w1(&d1, &d2, &mut vals)?;
        }
        l1_vs_l2.push((e, l2_equivalent_eps(e), mean(&vals)));
    }
    Ok(EpsilonReport { support, w1, l1_vs_l2 })
}

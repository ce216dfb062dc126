//! Rule-based rewards and group-relative advantages for external RL
//! trainers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, BBox};
use crate::eval::{params_match, MatchPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("group {group:?} has {got} rewards, expected {expected}")]
    GroupSize { group: String, got: usize, expected: usize },
    #[error("invalid advantage config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Binary,
    /// Gaussian spatial parameter reward for clicks; binary otherwise.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_type: f64,
    pub r_params: f64,
    pub total: f64,
    /// Click judged by the radius rule because the box was missing.
    pub radius_fallback: bool,
}

impl RewardBreakdown {
    fn new(r_type: f64, r_params: f64, radius_fallback: bool) -> Self {
        RewardBreakdown { r_type, r_params, total: r_type + r_params, radius_fallback }
    }

    pub const ZERO: RewardBreakdown = RewardBreakdown { r_type: 0.0, r_params: 0.0, total: 0.0, radius_fallback: false };
}

fn is_spatial(a: &Action) -> bool {
    matches!(a, Action::Click { .. } | Action::LongPress { .. })
}

/// Type reward plus a 0/1 parameter reward under the exact-match rules.
/// An unparsed prediction scores 0.
pub fn reward_binary(pred: Option<&Action>, gt: &Action, gt_bbox: Option<&BBox>, policy: &MatchPolicy) -> RewardBreakdown {
    let Some(pred) = pred else {
        return RewardBreakdown::ZERO;
    };
    if pred.kind() != gt.kind() {
        return RewardBreakdown::ZERO;
    }
    let fallback = is_spatial(gt) && gt_bbox.is_none();
    let hit = params_match(pred, gt, gt_bbox, policy);
    RewardBreakdown::new(1.0, if hit { 1.0 } else { 0.0 }, fallback)
}

/// exp(−(dx²/2σx² + dy²/2σy²)) around the box center with σ a quarter of
/// each extent. A degenerate box rewards only its center.
pub fn reward_gaussian_click(x: f64, y: f64, bbox: &BBox) -> f64 {
    let (cx, cy) = bbox.center();
    if bbox.is_degenerate() {
        return if x == cx.round() && y == cy.round() { 1.0 } else { 0.0 };
    }
    let (sx, sy) = (bbox.width() / 4.0, bbox.height() / 4.0);
    let (dx, dy) = (x - cx, y - cy);
    (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp()
}

pub fn reward(
    mode: RewardMode,
    pred: Option<&Action>,
    gt: &Action,
    gt_bbox: Option<&BBox>,
    policy: &MatchPolicy,
) -> RewardBreakdown {
    let binary = reward_binary(pred, gt, gt_bbox, policy);
    match (mode, pred, gt, gt_bbox) {
        (RewardMode::Gaussian, Some(Action::Click { point }), Action::Click { .. }, Some(b)) => {
            RewardBreakdown::new(1.0, reward_gaussian_click(point.x as f64, point.y as f64, b), false)
        }
        _ => binary,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvantageConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig { group_size: 16, eps_low: 0.2, eps_high: 0.3, beta: 0.0 }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.group_size < 2 {
            return Err(RewardError::Config(format!("group size {} < 2", self.group_size)));
        }
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high) {
            return Err(RewardError::Config(format!("need 0 < eps_low <= eps_high, got {} / {}", self.eps_low, self.eps_high)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub advantages: Vec<f64>,
    /// All rewards equal; a dynamic-sampling trainer would resample.
    pub zero_variance: bool,
}

/// (R − mean)/std with the population std.
pub fn group_advantages(rewards: &[f64], group_size: usize) -> Result<GroupAdvantages, RewardError> {
    if rewards.len() != group_size {
        return Err(RewardError::GroupSize { group: String::new(), got: rewards.len(), expected: group_size });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(GroupAdvantages { advantages: vec![0.0; rewards.len()], zero_variance: true });
    }
    Ok(GroupAdvantages { advantages: rewards.iter().map(|r| (r - mean) / std).collect(), zero_variance: false })
}

/// min(r·Â, clip(r, 1−ε_low, 1+ε_high)·Â).
pub fn clipped_term(ratio: f64, advantage: f64, cfg: &AdvantageConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub group: String,
    pub reward: f64,
    pub advantage: f64,
    pub zero_variance: bool,
}

/// Advantages for rows tagged by group id. Groups come out in id order,
/// rows within a group keep their input order.
pub fn score_groups(rows: &[(String, f64)], group_size: usize) -> Result<Vec<ScoredRow>, RewardError> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (g, r) in rows {
        groups.entry(g.as_str()).or_default().push(*r);
    }
    let mut out = Vec::with_capacity(rows.len());
    for (g, rewards) in groups {
        let adv = group_advantages(&rewards, group_size).map_err(|e| match e {
            RewardError::GroupSize { got, expected, .. } => RewardError::GroupSize { group: g.to_string(), got, expected },
            e => e,
        })?;
        for (r, a) in rewards.iter().zip(adv.advantages) {
            out.push(ScoredRow { group: g.to_string(), reward: *r, advantage: a, zero_variance: adv.zero_variance });
        }
    }
    Ok(out)
}

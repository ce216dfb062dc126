//! Semi-online evaluation pieces: normalized logistic mixing schedules,
//! the on-policy artifact pool, OSR and the regime sweep.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::gateway::Gateway;
use crate::run_store::RunRecord;
use crate::runner::{par_map, run_episode, HistoryMode, RunError, RunSetup};
use crate::task::{Episode, StepId};

#[derive(Debug, Error, PartialEq)]
pub enum SoevalError {
    #[error("invalid schedule shape: {0}")]
    InvalidShape(String),
    #[error("empty schedule (T = 0)")]
    EmptySchedule,
    #[error("step {t} outside a schedule of length {len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("target mean {target} outside the admissible range [{lo}, {hi}]")]
    OutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("OSR undefined: no history positions")]
    UndefinedOsr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normalized logistic on [0,1]: 0 at x=0, 1 at x=1 when increasing, and
/// the complement when decreasing.
pub fn nlogi(x: f64, kappa: f64, mu: f64, trend: Trend) -> Result<f64, SoevalError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(SoevalError::InvalidShape(format!("kappa must be > 0, got {kappa}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(SoevalError::InvalidShape(format!("x must lie in [0,1], got {x}")));
    }
    let lo = sigmoid(-kappa * mu);
    let up = (sigmoid(kappa * (x - mu)) - lo) / (sigmoid(kappa * (1.0 - mu)) - lo);
    Ok(match trend {
        Trend::Increasing => up,
        Trend::Decreasing => 1.0 - up,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub p_lb: f64,
    pub gap: f64,
    pub kappa: f64,
    pub mu: f64,
    pub trend: Trend,
}

impl Schedule {
    pub fn new(p_lb: f64, gap: f64, kappa: f64, mu: f64, trend: Trend) -> Result<Self, SoevalError> {
        let s = Schedule { p_lb, gap, kappa, mu, trend };
        s.validate()?;
        Ok(s)
    }

    /// Constant probability `p`.
    pub fn stationary(p: f64) -> Result<Self, SoevalError> {
        Self::new(p, 0.0, 16.0, 0.5, Trend::Increasing)
    }

    pub fn validate(&self) -> Result<(), SoevalError> {
        const EPS: f64 = 1e-12;
        // p_lb = 1 is allowed for the (1,1) stationary regime of the sweep grid
        if !(0.0..=1.0).contains(&self.p_lb) {
            return Err(SoevalError::InvalidShape(format!("p_lb {} outside [0,1]", self.p_lb)));
        }
        if self.gap < 0.0 || self.gap > 1.0 - self.p_lb + EPS {
            return Err(SoevalError::InvalidShape(format!("gap {} outside [0, {}]", self.gap, 1.0 - self.p_lb)));
        }
        if !(self.kappa > 0.0) {
            return Err(SoevalError::InvalidShape(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(SoevalError::InvalidShape(format!("mu {} outside (0,1)", self.mu)));
        }
        Ok(())
    }

    /// p at step ratio `sr` ∈ [0,1].
    pub fn at_ratio(&self, sr: f64) -> f64 {
        let shape = nlogi(sr.clamp(0.0, 1.0), self.kappa, self.mu, self.trend).expect("validated schedule");
        (self.p_lb + self.gap * shape).clamp(0.0, 1.0)
    }

    /// Mean of p over sr ∈ [0,1], 1024-point trapezoid.
    pub fn mean(&self) -> f64 {
        mean_probability(self.p_lb, self.gap, self.kappa, self.mu, self.trend)
    }
}

/// Substitution probability at history position `t` of `len`, with
/// sr(t) = (t+1)/len.
pub fn schedule_probability(t: usize, len: usize, sched: &Schedule) -> Result<f64, SoevalError> {
    if len == 0 {
        return Err(SoevalError::EmptySchedule);
    }
    if t >= len {
        return Err(SoevalError::StepOutOfRange { t, len });
    }
    Ok(sched.at_ratio((t + 1) as f64 / len as f64))
}

pub fn schedule_probabilities(len: usize, sched: &Schedule) -> Vec<f64> {
    (0..len).map(|t| sched.at_ratio((t + 1) as f64 / len as f64)).collect()
}

/// Bernoulli substitution indicators for a history of `len` positions.
pub fn sample_mask(len: usize, sched: &Schedule, rng: &mut impl Rng) -> Vec<bool> {
    schedule_probabilities(len, sched).into_iter().map(|p| rng.gen_bool(p)).collect()
}

const QUAD_POINTS: usize = 1024;
const MU_MIN: f64 = 1e-9;
const MU_MAX: f64 = 1.0 - 1e-9;

fn mean_probability(p_lb: f64, gap: f64, kappa: f64, mu: f64, trend: Trend) -> f64 {
    let h = 1.0 / (QUAD_POINTS - 1) as f64;
    let mut sum = 0.0;
    for k in 0..QUAD_POINTS {
        let w = if k == 0 || k == QUAD_POINTS - 1 { 0.5 } else { 1.0 };
        sum += w * nlogi(k as f64 * h, kappa, mu, trend).expect("kappa checked");
    }
    p_lb + gap * sum * h
}

/// Attainable means of p as μ sweeps (0,1).
pub fn admissible_range(p_lb: f64, gap: f64, kappa: f64, trend: Trend) -> Result<(f64, f64), SoevalError> {
    Schedule::new(p_lb, gap, kappa, 0.5, trend)?;
    let a = mean_probability(p_lb, gap, kappa, MU_MIN, trend);
    let b = mean_probability(p_lb, gap, kappa, MU_MAX, trend);
    Ok((a.min(b), a.max(b)))
}

/// μ whose schedule has mean `target`, by bisection (the mean is monotone
/// in μ). With gap = 0 only `target == p_lb` is attainable and μ = 0.5.
pub fn solve_mu(p_lb: f64, gap: f64, kappa: f64, trend: Trend, target: f64) -> Result<f64, SoevalError> {
    let (lo, hi) = admissible_range(p_lb, gap, kappa, trend)?;
    if gap == 0.0 {
        return if (target - p_lb).abs() <= 1e-12 {
            Ok(0.5)
        } else {
            Err(SoevalError::OutOfRange { target, lo: p_lb, hi: p_lb })
        };
    }
    if !(lo - 1e-12..=hi + 1e-12).contains(&target) {
        return Err(SoevalError::OutOfRange { target, lo, hi });
    }
    let f = |mu: f64| mean_probability(p_lb, gap, kappa, mu, trend) - target;
    // increasing: mean falls as μ grows; decreasing: mean rises
    let falling = trend == Trend::Increasing;
    let (mut a, mut b) = (MU_MIN, MU_MAX);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let v = f(m);
        if v.abs() < 1e-12 || b - a < 1e-15 {
            return Ok(m);
        }
        if (v > 0.0) == falling {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Share of history positions rendered from on-policy artifacts, over all
/// evaluated steps.
pub fn compute_osr<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Result<f64, SoevalError> {
    let (mut used, mut total) = (0usize, 0usize);
    for r in records {
        used += r.history_mask.iter().filter(|b| **b).count();
        total += r.history_mask.len();
    }
    if total == 0 {
        return Err(SoevalError::UndefinedOsr);
    }
    Ok(used as f64 / total as f64)
}

/// Like [`compute_osr`] but over positions that had an artifact available.
pub fn compute_osr_eligible<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Result<f64, SoevalError> {
    let (mut used, mut total) = (0usize, 0usize);
    for r in records {
        used += r.history_mask.iter().zip(&r.eligible_mask).filter(|(u, e)| **u && **e).count();
        total += r.eligible_mask.iter().filter(|b| **b).count();
    }
    if total == 0 {
        return Err(SoevalError::UndefinedOsr);
    }
    Ok(used as f64 / total as f64)
}

/// A model output that exact-matched the reference at `step`, kept for
/// reuse as history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnPolicyArtifact {
    pub step: StepId,
    pub thought: Option<String>,
    pub conclusion: Option<String>,
    pub action: Action,
    pub raw_response: String,
}

impl OnPolicyArtifact {
    /// Only exact-matched predictions qualify.
    pub fn from_record(r: &RunRecord) -> Option<Self> {
        if !r.evaluation.exact_match {
            return None;
        }
        Some(OnPolicyArtifact {
            step: StepId { episode_id: r.key.episode_id.clone(), step_index: r.key.step_index },
            thought: r.parsed.thought.clone(),
            conclusion: r.parsed.conclusion.clone(),
            action: r.prediction.clone()?,
            raw_response: r.raw_response.clone(),
        })
    }

    /// The reference action itself, with no reasoning attached.
    pub fn from_reference(ep: &Episode, t: usize) -> Self {
        let s = &ep.steps[t];
        OnPolicyArtifact { step: s.key(), thought: None, conclusion: None, action: s.gt_action.clone(), raw_response: String::new() }
    }
}

/// Artifacts grouped by their originating step. Reuse is only allowed at
/// the exact same step.
#[derive(Debug, Clone, Default)]
pub struct ArtifactPool {
    by_step: HashMap<StepId, Vec<OnPolicyArtifact>>,
}

impl ArtifactPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: OnPolicyArtifact) {
        self.by_step.entry(a.step.clone()).or_default().push(a);
    }

    /// Collect artifacts from exact-matched records.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut pool = Self::new();
        for a in records.into_iter().filter_map(OnPolicyArtifact::from_record) {
            pool.insert(a);
        }
        pool
    }

    /// Pool where every step's artifact is its reference action.
    pub fn oracle(episodes: &[Episode]) -> Self {
        let mut pool = Self::new();
        for ep in episodes {
            for t in 0..ep.len() {
                pool.insert(OnPolicyArtifact::from_reference(ep, t));
            }
        }
        pool
    }

    pub fn contains(&self, step: &StepId) -> bool {
        self.by_step.get(step).is_some_and(|v| !v.is_empty())
    }

    pub fn get(&self, step: &StepId) -> &[OnPolicyArtifact] {
        self.by_step.get(step).map(Vec::as_slice).unwrap_or_default()
    }

    /// Uniform draw among the artifacts recorded for `step`.
    pub fn draw(&self, step: &StepId, rng: &mut impl Rng) -> Option<&OnPolicyArtifact> {
        let v = self.by_step.get(step)?;
        (!v.is_empty()).then(|| &v[rng.gen_range(0..v.len())])
    }

    /// Number of steps with at least one artifact.
    pub fn steps(&self) -> usize {
        self.by_step.values().filter(|v| !v.is_empty()).count()
    }

    pub fn len(&self) -> usize {
        self.by_step.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One JSON artifact per line, ordered by step.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut keys: Vec<&StepId> = self.by_step.keys().collect();
        keys.sort_by(|a, b| (&a.episode_id, a.step_index).cmp(&(&b.episode_id, b.step_index)));
        let mut f = io::BufWriter::new(File::create(path)?);
        for k in keys {
            for a in &self.by_step[k] {
                writeln!(f, "{}", serde_json::to_string(a).expect("artifact serializes"))?;
            }
        }
        f.flush()
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let mut pool = Self::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let a = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            pool.insert(a);
        }
        Ok(pool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Increasing,
    Decreasing,
    Stationary,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Increasing => "increasing",
            Regime::Decreasing => "decreasing",
            Regime::Stationary => "stationary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub kappa: f64,
    /// Evenly spaced endpoint values in [0,1].
    pub grid: usize,
    pub samples_per_pair: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { kappa: 16.0, grid: 4, samples_per_pair: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetting {
    pub index: usize,
    pub regime: Regime,
    pub p_start: f64,
    pub p_end: f64,
    pub target_mean: f64,
    pub schedule: Schedule,
}

/// All (p_start, p_end) pairs over the grid, each with
/// `samples_per_pair` target means drawn uniformly from the admissible
/// range.
pub fn sweep_settings(cfg: &SweepConfig) -> Result<Vec<SweepSetting>, SoevalError> {
    if cfg.grid < 2 {
        return Err(SoevalError::InvalidShape(format!("grid needs at least 2 values, got {}", cfg.grid)));
    }
    let values: Vec<f64> = (0..cfg.grid).map(|k| k as f64 / (cfg.grid - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(values.len().pow(2) * cfg.samples_per_pair);
    for &p_start in &values {
        for &p_end in &values {
            let (regime, trend, p_lb, gap) = if p_end > p_start {
                (Regime::Increasing, Trend::Increasing, p_start, p_end - p_start)
            } else if p_end < p_start {
                (Regime::Decreasing, Trend::Decreasing, p_end, p_start - p_end)
            } else {
                (Regime::Stationary, Trend::Increasing, p_start, 0.0)
            };
            let (lo, hi) = admissible_range(p_lb, gap, cfg.kappa, trend)?;
            for _ in 0..cfg.samples_per_pair {
                let target_mean = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let mu = solve_mu(p_lb, gap, cfg.kappa, trend, target_mean)?;
                let schedule = Schedule::new(p_lb, gap, cfg.kappa, mu, trend)?;
                out.push(SweepSetting { index: out.len(), regime, p_start, p_end, target_mean, schedule });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub regime: Regime,
    pub p_start: f64,
    pub p_end: f64,
    pub target_mean: f64,
    pub mu: f64,
    pub osr: f64,
    pub osr_eligible: f64,
    pub exact_match: f64,
    pub steps: usize,
    pub positions: usize,
}

/// Mean exact match over comparable steps.
fn exact_rate<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records.into_iter().filter(|r| r.evaluation.comparable) {
        hit += r.evaluation.exact_match as usize;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Replay the benchmark once per setting with pool substitution under that
/// setting's schedule. Settings run in parallel; each owns a mask stream
/// seeded from (setting index, global seed).
pub fn regime_sweep(
    gw: &Gateway,
    episodes: &[Episode],
    setup: &RunSetup,
    pool: &ArtifactPool,
    cfg: &SweepConfig,
) -> Result<Vec<SweepPoint>, RunError> {
    let settings = sweep_settings(cfg).map_err(|e| RunError::Setup(e.to_string()))?;
    let results = par_map(&settings, |s| {
        let mask_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ s.index as u64;
        let mode = HistoryMode::Pool { pool, schedule: &s.schedule, mask_seed };
        let mut records = Vec::new();
        for ep in episodes {
            records.extend(run_episode(gw, ep, setup, mode, None)?.records);
        }
        let positions = records.iter().map(|r| r.history_mask.len()).sum();
        Ok::<_, RunError>(SweepPoint {
            index: s.index,
            regime: s.regime,
            p_start: s.p_start,
            p_end: s.p_end,
            target_mean: s.target_mean,
            mu: s.schedule.mu,
            osr: compute_osr(&records).unwrap_or(0.0),
            osr_eligible: compute_osr_eligible(&records).unwrap_or(0.0),
            exact_match: exact_rate(&records),
            steps: records.len(),
            positions,
        })
    });
    results.into_iter().collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "regime", "p_start", "p_end", "target_mean", "mu", "osr", "osr_eligible", "exact_match", "steps", "positions"])?;
    for p in points {
        w.write_record([
            p.index.to_string(),
            p.regime.as_str().to_string(),
            format!("{:.6}", p.p_start),
            format!("{:.6}", p.p_end),
            format!("{:.6}", p.target_mean),
            format!("{:.6}", p.mu),
            format!("{:.6}", p.osr),
            format!("{:.6}", p.osr_eligible),
            format!("{:.6}", p.exact_match),
            p.steps.to_string(),
            p.positions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

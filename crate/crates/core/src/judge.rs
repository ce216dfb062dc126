//! Reasoning–execution consistency: judges replay a pinned reasoning trace,
//! their majority executions are pooled across judges, and the consensus
//! is compared with what the agent actually did.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, Dims};
use crate::analytics::{build_distribution, ClusterConfig, ExecutionSample};
use crate::dialect::Dialect;
use crate::eval::{evaluate_step_with, MatchPolicy};
use crate::gateway::{prepare_input, Gateway, GatewayError, PromptFlags};
use crate::runner::par_map;
use crate::stats::{wilson_interval, ConfusionMatrix, Z95};
use crate::task::{Observation, StepTask};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("case {0}: empty reasoning trace")]
    EmptyTrace(String),
    #[error("case {case}: judge {judge}: {source}")]
    Gateway { case: String, judge: String, source: GatewayError },
    #[error("case {0}: every judge abstained")]
    Undecidable(String),
    #[error("no judges configured")]
    NoJudges,
    #[error("{path}: line {line}: {msg}")]
    CaseFile { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyLabel {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCase {
    pub id: String,
    pub instruction: String,
    pub screenshot: PathBuf,
    pub dims: Dims,
    #[serde(default)]
    pub text_desc: Option<String>,
    pub reasoning_trace: String,
    /// `None` when the agent's output did not parse.
    pub executed_action: Option<Action>,
    #[serde(default)]
    pub human_label: Option<ConsistencyLabel>,
}

impl ConsistencyCase {
    /// The single step a judge sees. The executed action stands in for the
    /// reference action; it never reaches the prompt.
    fn as_step(&self) -> StepTask {
        StepTask {
            episode_id: self.id.clone(),
            step_index: 0,
            instruction_high: self.instruction.clone(),
            instruction_low: None,
            observation: Observation { screenshot: self.screenshot.clone(), text_desc: self.text_desc.clone(), dims: self.dims },
            gt_action: self.executed_action.clone().unwrap_or(Action::Wait { duration_ms: None }),
            gt_bbox: None,
        }
    }
}

pub struct Judge<'a> {
    pub name: String,
    pub gateway: &'a Gateway,
    pub dialect: Dialect,
    pub seed: u64,
}

/// The most frequent decision among one judge's rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityDecision {
    pub judge: String,
    /// Representative of the top cluster; `None` when nothing parsed.
    pub action: Option<Action>,
    pub mass: f64,
    /// Another cluster had the same size; the canonical order picked.
    pub tie: bool,
    pub parsed: usize,
    pub rollouts: usize,
}

impl MajorityDecision {
    pub fn abstained(&self) -> bool {
        self.action.is_none()
    }
}

/// Cluster `samples` and return the heaviest parsed decision.
pub fn majority_of(judge: &str, samples: &[ExecutionSample], cfg: &ClusterConfig) -> MajorityDecision {
    let parsed = samples.iter().filter(|s| s.parse_ok()).count();
    let mut out = MajorityDecision { judge: judge.to_string(), action: None, mass: 0.0, tie: false, parsed, rollouts: samples.len() };
    let Ok(dist) = build_distribution(samples, cfg) else {
        return out;
    };
    let mut valid = dist.decisions.iter().filter(|d| !d.is_invalid());
    if let Some(top) = valid.next() {
        out.action = top.representative.clone();
        out.mass = top.mass;
        out.tie = valid.next().is_some_and(|second| second.members.len() == top.members.len());
    }
    out
}

/// Run `n` fixed-thought rollouts of the case's trace through one judge.
pub fn judge_majority(judge: &Judge<'_>, case: &ConsistencyCase, n: u32, cfg: &ClusterConfig) -> Result<MajorityDecision, JudgeError> {
    if case.reasoning_trace.trim().is_empty() {
        return Err(JudgeError::EmptyTrace(case.id.clone()));
    }
    let wrap = |source| JudgeError::Gateway { case: case.id.clone(), judge: judge.name.clone(), source };
    let flags = PromptFlags { enable_thinking: true, fixed_thought: Some(case.reasoning_trace.clone()), image_budget: 0 };
    let mut req = prepare_input(&case.as_step(), &[], &judge.dialect, &flags, 0, judge.seed).map_err(wrap)?;
    req.n = n;
    let samples: Vec<ExecutionSample> = judge
        .gateway
        .generate(&req)
        .map_err(wrap)?
        .iter()
        .map(|raw| {
            let parsed = judge.dialect.parse_response(raw, case.dims);
            ExecutionSample {
                action: parsed.action.action().cloned(),
                thought: None,
                seed: judge.seed,
                round: 0,
                failure: parsed.action.failure().map(|f| f.to_string()),
            }
        })
        .collect();
    Ok(majority_of(&judge.name, &samples, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    /// Planning or action selection error.
    ActionTypeMismatch,
    /// Target grounding error.
    ActionTargetMismatch,
    InvalidAction,
}

impl FailureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::ActionTypeMismatch => "action_type_mismatch",
            FailureClass::ActionTargetMismatch => "action_target_mismatch",
            FailureClass::InvalidAction => "invalid_action",
        }
    }
}

pub fn classify_failure(consensus: &Action, executed: Option<&Action>) -> FailureClass {
    match executed {
        None => FailureClass::InvalidAction,
        Some(e) if e.kind() != consensus.kind() => FailureClass::ActionTypeMismatch,
        Some(_) => FailureClass::ActionTargetMismatch,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub case_id: String,
    pub per_judge: Vec<MajorityDecision>,
    /// `None` when the top judge groups tie.
    pub consensus: Option<Action>,
    pub consensus_tie: bool,
    pub consistent: bool,
    /// Set for inconsistent cases with a consensus, or with an unparsed
    /// execution.
    pub failure: Option<FailureClass>,
}

fn same_decision(a: &Action, b: &Action, policy: &MatchPolicy) -> bool {
    evaluate_step_with(a, b, None, policy).exact_match
}

/// Plurality over judge majorities, grouping decisions that exact-match
/// the first member of a group. A tie between the largest groups yields no
/// consensus and an inconsistent verdict.
pub fn two_stage_verdict(
    case_id: &str,
    majorities: Vec<MajorityDecision>,
    executed: Option<&Action>,
    policy: &MatchPolicy,
) -> Result<JudgeVerdict, JudgeError> {
    let mut groups: Vec<(&Action, usize)> = Vec::new();
    for a in majorities.iter().filter_map(|m| m.action.as_ref()) {
        match groups.iter_mut().find(|(rep, _)| same_decision(a, rep, policy)) {
            Some(g) => g.1 += 1,
            None => groups.push((a, 1)),
        }
    }
    let top = groups.iter().map(|g| g.1).max().ok_or_else(|| JudgeError::Undecidable(case_id.to_string()))?;
    let leaders: Vec<&Action> = groups.iter().filter(|g| g.1 == top).map(|g| g.0).collect();
    let consensus = (leaders.len() == 1).then(|| leaders[0].clone());
    let consistent = match (&consensus, executed) {
        (Some(c), Some(e)) => same_decision(e, c, policy),
        _ => false,
    };
    let failure = match (&consensus, consistent) {
        (_, true) => None,
        (Some(c), false) => Some(classify_failure(c, executed)),
        (None, false) => executed.is_none().then_some(FailureClass::InvalidAction),
    };
    Ok(JudgeVerdict { case_id: case_id.to_string(), consensus_tie: consensus.is_none(), consensus, consistent, failure, per_judge: majorities })
}

pub fn judge_case(
    judges: &[Judge<'_>],
    case: &ConsistencyCase,
    n: u32,
    cfg: &ClusterConfig,
    policy: &MatchPolicy,
) -> Result<JudgeVerdict, JudgeError> {
    if judges.is_empty() {
        return Err(JudgeError::NoJudges);
    }
    let majorities = judges.iter().map(|j| judge_majority(j, case, n, cfg)).collect::<Result<Vec<_>, _>>()?;
    two_stage_verdict(&case.id, majorities, case.executed_action.as_ref(), policy)
}

/// Cases are independent; results keep input order.
pub fn judge_cases(
    judges: &[Judge<'_>],
    cases: &[ConsistencyCase],
    n: u32,
    cfg: &ClusterConfig,
    policy: &MatchPolicy,
) -> Vec<Result<JudgeVerdict, JudgeError>> {
    par_map(cases, |c| judge_case(judges, c, n, cfg, policy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub estimate: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl RateEstimate {
    fn new(k: u64, n: u64) -> Self {
        RateEstimate { estimate: (n > 0).then(|| k as f64 / n as f64), ci: wilson_interval(k, n, Z95).ok() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub matrix: ConfusionMatrix,
    pub accuracy: RateEstimate,
    pub tpr: RateEstimate,
    pub tnr: RateEstimate,
}

pub fn detector_report(m: ConfusionMatrix) -> DetectorReport {
    DetectorReport {
        matrix: m,
        accuracy: RateEstimate::new(m.tp + m.tn, m.total()),
        tpr: RateEstimate::new(m.tp, m.tp + m.fn_),
        tnr: RateEstimate::new(m.tn, m.tn + m.fp),
    }
}

/// Confusion matrix over labelled cases that received a verdict; positive
/// is "consistent".
pub fn detector_validation(cases: &[ConsistencyCase], verdicts: &[JudgeVerdict]) -> DetectorReport {
    let by_id: std::collections::HashMap<&str, bool> = verdicts.iter().map(|v| (v.case_id.as_str(), v.consistent)).collect();
    let pairs = cases.iter().filter_map(|c| {
        let label = c.human_label? == ConsistencyLabel::Consistent;
        Some((label, *by_id.get(c.id.as_str())?))
    });
    detector_report(ConfusionMatrix::from_pairs(pairs))
}

/// One JSON case per line; blank lines are skipped.
pub fn load_cases(path: &Path) -> Result<Vec<ConsistencyCase>, JudgeError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: ConsistencyCase = serde_json::from_str(&line)
            .map_err(|e| JudgeError::CaseFile { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        if case.reasoning_trace.trim().is_empty() {
            return Err(JudgeError::CaseFile { path: path.to_path_buf(), line: i + 1, msg: "empty reasoning_trace".into() });
        }
        out.push(case);
    }
    Ok(out)
}

/// Verdict CSV: one row per case, per-judge majorities as `name=ACTION`
/// joined by `;`.
pub fn write_verdicts_csv<W: Write>(w: W, verdicts: &[JudgeVerdict]) -> Result<(), JudgeError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["case_id", "consistent", "consensus", "consensus_tie", "failure", "per_judge"])?;
    for v in verdicts {
        let per_judge = v
            .per_judge
            .iter()
            .map(|m| format!("{}={}", m.judge, m.action.as_ref().map_or("ABSTAIN".into(), Action::canonical)))
            .collect::<Vec<_>>()
            .join(";");
        out.write_record([
            v.case_id.clone(),
            v.consistent.to_string(),
            v.consensus.as_ref().map(Action::canonical).unwrap_or_default(),
            v.consensus_tie.to_string(),
            v.failure.map(FailureClass::as_str).unwrap_or("").to_string(),
            per_judge,
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;

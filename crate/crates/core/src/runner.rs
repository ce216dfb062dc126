//! Step-by-step episode replay. The history policy decides what the model
//! sees of earlier steps: the reference trajectory (offline), its own
//! exact-matched outputs (semi-online, live), or artifacts drawn from a
//! pool under a mixing schedule.

use std::collections::BTreeMap;
use std::sync::Mutex;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::KindSet;
use crate::dialect::{Dialect, EntrySource, HistoryEntry};
use crate::eval::{episode_metrics, score_step, EpisodeMetrics, MatchPolicy, ScoreContext};
use crate::gateway::{digest, prepare_input, Gateway, GatewayError, PromptFlags};
use crate::run_store::{RecordKey, RunRecord, RunStore, StoreError};
use crate::soeval::{sample_mask, ArtifactPool, OnPolicyArtifact, Schedule};
use crate::task::Episode;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("episode {episode} incomplete at step {step}: {source}")]
    Incomplete {
        episode: String,
        step: usize,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run setup: {0}")]
    Setup(String),
}

/// Everything about a run that is fixed across episodes.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub dialect: Dialect,
    pub flags: PromptFlags,
    pub benchmark_space: KindSet,
    pub policy: MatchPolicy,
    pub round: u32,
    pub seed: u64,
}

impl RunSetup {
    pub fn new(dialect: Dialect) -> Self {
        RunSetup {
            dialect,
            flags: PromptFlags::default(),
            benchmark_space: KindSet::all(),
            policy: MatchPolicy::default(),
            round: 0,
            seed: 0,
        }
    }

    fn score_context(&self) -> ScoreContext<'_> {
        ScoreContext { dialect: &self.dialect, benchmark_space: self.benchmark_space, policy: self.policy }
    }
}

#[derive(Clone, Copy)]
pub enum HistoryMode<'a> {
    /// Reference entries only.
    Reference,
    /// Reference entries, replaced by the run's own output wherever that
    /// output exact-matched.
    Live,
    /// Per position, a Bernoulli draw under `schedule` decides whether to
    /// substitute an artifact from `pool`.
    Pool { pool: &'a ArtifactPool, schedule: &'a Schedule, mask_seed: u64 },
}

impl HistoryMode<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            HistoryMode::Reference => "offline",
            HistoryMode::Live => "soeval-live",
            HistoryMode::Pool { .. } => "soeval-pool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub records: Vec<RunRecord>,
    pub metrics: EpisodeMetrics,
}

fn reference_entry(ep: &Episode, t: usize) -> HistoryEntry {
    let s = &ep.steps[t];
    HistoryEntry {
        step_index: t,
        action: s.gt_action.clone(),
        source: EntrySource::Reference,
        screenshot: s.observation.screenshot.clone(),
    }
}

fn artifact_entry(ep: &Episode, t: usize, a: &OnPolicyArtifact) -> HistoryEntry {
    HistoryEntry {
        step_index: t,
        action: a.action.clone(),
        source: EntrySource::Artifact { thought: a.thought.clone(), conclusion: a.conclusion.clone() },
        screenshot: ep.steps[t].observation.screenshot.clone(),
    }
}

/// Seed for the substitution mask at one evaluated step; stable across
/// resumes and worker layouts.
fn mask_rng(mask_seed: u64, ep: &Episode, step: usize) -> ChaCha8Rng {
    let d = digest(&(mask_seed, &ep.id, step));
    let mut seed = [0u8; 32];
    hex::decode_to_slice(&d[..64], &mut seed).expect("sha256 hex");
    ChaCha8Rng::from_seed(seed)
}

/// History for step `i` plus per-position substitution and eligibility
/// masks. Positions the dialect cannot express are left out of the
/// rendered history and never count as substituted.
fn build_history(
    ep: &Episode,
    i: usize,
    mode: HistoryMode<'_>,
    own: &[RunRecord],
    dialect: &Dialect,
) -> (Vec<HistoryEntry>, Vec<bool>, Vec<bool>) {
    let mut entries = Vec::with_capacity(i);
    let mut used = vec![false; i];
    let mut eligible = vec![false; i];
    let draws = match mode {
        HistoryMode::Pool { schedule, mask_seed, .. } => sample_mask(i, schedule, &mut mask_rng(mask_seed, ep, i)),
        _ => Vec::new(),
    };
    for t in 0..i {
        let mut entry = reference_entry(ep, t);
        match mode {
            HistoryMode::Reference => {}
            HistoryMode::Live => {
                if let Some(a) = own.get(t).and_then(OnPolicyArtifact::from_record) {
                    eligible[t] = true;
                    used[t] = true;
                    entry = artifact_entry(ep, t, &a);
                }
            }
            HistoryMode::Pool { pool, mask_seed, .. } => {
                let key = ep.steps[t].key();
                eligible[t] = pool.contains(&key);
                if draws[t] {
                    let mut rng = mask_rng(mask_seed ^ 0xa5a5_a5a5, ep, i * 1_000_003 + t);
                    match pool.draw(&key, &mut rng) {
                        Some(a) => {
                            used[t] = true;
                            entry = artifact_entry(ep, t, a);
                        }
                        None => debug!("no pool artifact for {key}; keeping the reference entry"),
                    }
                }
            }
        }
        if dialect.can_represent(&entry.action) {
            entries.push(entry);
        } else {
            used[t] = false;
        }
    }
    (entries, used, eligible)
}

/// Replay one episode. Records already present in `store` are reused
/// without calling the model; new ones are appended as they are produced.
pub fn run_episode(
    gw: &Gateway,
    ep: &Episode,
    setup: &RunSetup,
    mode: HistoryMode<'_>,
    store: Option<&Mutex<RunStore>>,
) -> Result<EpisodeOutcome, RunError> {
    let ctx = setup.score_context();
    let mut records: Vec<RunRecord> = Vec::with_capacity(ep.len());
    for (i, step) in ep.steps.iter().enumerate() {
        let key = RecordKey {
            mode: mode.label().to_string(),
            round: setup.round,
            episode_id: ep.id.clone(),
            step_index: i,
            sample: 0,
        };
        if let Some(prev) = store.and_then(|s| s.lock().expect("store lock").get(&key).cloned()) {
            records.push(prev);
            continue;
        }
        let (history, used, eligible) = build_history(ep, i, mode, &records, &setup.dialect);
        let incomplete = |source| RunError::Incomplete { episode: ep.id.clone(), step: i, source };
        let req = prepare_input(step, &history, &setup.dialect, &setup.flags, setup.round, setup.seed)
            .map_err(incomplete)?;
        let raw = gw.generate(&req).map_err(incomplete)?.into_iter().next().unwrap_or_default();
        let parsed = setup.dialect.parse_response(&raw, step.observation.dims);
        let evaluation = score_step(&parsed.action, &step.gt_action, step.gt_bbox.as_ref(), &ctx);
        let mut rec = RunRecord {
            key,
            seed: setup.seed,
            episode_len: ep.len(),
            truncated: ep.is_truncated(),
            gt_action: step.gt_action.clone(),
            raw_response: raw,
            prediction: parsed.action.action().cloned(),
            parsed,
            evaluation,
            history_mask: used,
            eligible_mask: if matches!(mode, HistoryMode::Reference) { Vec::new() } else { eligible },
            artifact: None,
        };
        rec.artifact = OnPolicyArtifact::from_record(&rec).map(|a| serde_json::to_string(&a).expect("artifact serializes"));
        if let Some(s) = store {
            s.lock().expect("store lock").append(rec.clone())?;
        }
        records.push(rec);
    }
    let exact: Vec<bool> = records.iter().map(|r| r.evaluation.exact_match).collect();
    Ok(EpisodeOutcome { episode_id: ep.id.clone(), metrics: episode_metrics(&exact, ep.len()), records })
}

/// Map over items on the rayon pool when available.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[derive(Debug, Default)]
pub struct BenchmarkRun {
    pub outcomes: Vec<EpisodeOutcome>,
    /// Episodes that stopped on a gateway failure; rerun to resume.
    pub incomplete: BTreeMap<String, String>,
}

impl BenchmarkRun {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.outcomes.iter().flat_map(|o| &o.records)
    }
}

/// Replay every episode, in parallel across episodes. Gateway failures
/// leave the episode incomplete; store failures abort the run.
pub fn run_benchmark(
    gw: &Gateway,
    episodes: &[Episode],
    setup: &RunSetup,
    mode: HistoryMode<'_>,
    store: Option<&Mutex<RunStore>>,
) -> Result<BenchmarkRun, RunError> {
    let results = par_map(episodes, |ep| run_episode(gw, ep, setup, mode, store));
    let mut run = BenchmarkRun::default();
    for r in results {
        match r {
            Ok(o) => run.outcomes.push(o),
            Err(RunError::Incomplete { episode, step, source }) => {
                warn!("episode {episode} stopped at step {step}: {source}");
                run.incomplete.insert(episode, source.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    run.outcomes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    Ok(run)
}

/// Sample `n` completions per step against reference histories; one
/// record per sample, keyed by sample index.
pub fn rollout_episode(gw: &Gateway, ep: &Episode, setup: &RunSetup, n: u32) -> Result<Vec<RunRecord>, RunError> {
    let ctx = setup.score_context();
    let mut out = Vec::with_capacity(ep.len() * n as usize);
    for (i, step) in ep.steps.iter().enumerate() {
        let (history, _, _) = build_history(ep, i, HistoryMode::Reference, &[], &setup.dialect);
        let incomplete = |source| RunError::Incomplete { episode: ep.id.clone(), step: i, source };
        let mut req = prepare_input(step, &history, &setup.dialect, &setup.flags, setup.round, setup.seed)
            .map_err(incomplete)?;
        req.n = n;
        for (s, raw) in gw.generate(&req).map_err(incomplete)?.into_iter().enumerate() {
            let parsed = setup.dialect.parse_response(&raw, step.observation.dims);
            let evaluation = score_step(&parsed.action, &step.gt_action, step.gt_bbox.as_ref(), &ctx);
            let mut rec = RunRecord {
                key: RecordKey {
                    mode: "rollout".into(),
                    round: setup.round,
                    episode_id: ep.id.clone(),
                    step_index: i,
                    sample: s as u32,
                },
                seed: setup.seed,
                episode_len: ep.len(),
                truncated: ep.is_truncated(),
                gt_action: step.gt_action.clone(),
                raw_response: raw,
                prediction: parsed.action.action().cloned(),
                parsed,
                evaluation,
                history_mask: vec![false; i],
                eligible_mask: Vec::new(),
                artifact: None,
            };
            rec.artifact = OnPolicyArtifact::from_record(&rec).map(|a| serde_json::to_string(&a).expect("artifact serializes"));
            out.push(rec);
        }
    }
    Ok(out)
}

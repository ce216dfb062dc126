//! In-process scripted backend. Responses are pure functions of the
//! request metadata, so runs against it are reproducible.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Backend, BackendError, EndpointConfig, GenerationRequest};
use crate::action::{Action, Direction, Point};
use crate::dialect::{Dialect, DialectId};
use crate::task::{Episode, StepId};

pub trait ScriptedAgent: Send + Sync {
    /// Text for one sample; a continuation when the request pins a thought.
    fn respond(&self, req: &GenerationRequest, sample: u32) -> Result<String, BackendError>;
}

impl<F> ScriptedAgent for F
where
    F: Fn(&GenerationRequest, u32) -> Result<String, BackendError> + Send + Sync,
{
    fn respond(&self, req: &GenerationRequest, sample: u32) -> Result<String, BackendError> {
        self(req, sample)
    }
}

/// Injected failures, counted over backend calls.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// The first `transient_first` calls time out.
    pub transient_first: usize,
    /// Every call from this index on fails fatally.
    pub fail_after: Option<usize>,
    /// Every call answers with this HTTP status and body.
    pub http_error: Option<(u16, String)>,
}

pub struct MockBackend {
    agent: Arc<dyn ScriptedAgent>,
    delay: Duration,
    faults: Mutex<Faults>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(agent: Arc<dyn ScriptedAgent>) -> Self {
        MockBackend {
            agent,
            delay: Duration::ZERO,
            faults: Mutex::new(Faults::default()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_faults(self, faults: Faults) -> Self {
        *self.faults.lock().expect("faults lock") = faults;
        self
    }

    pub fn set_faults(&self, faults: Faults) {
        *self.faults.lock().expect("faults lock") = faults;
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of concurrent calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest, _cfg: &EndpointConfig) -> Result<Vec<String>, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.peak.fetch_max(now, Ordering::SeqCst);
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let faults = self.faults.lock().expect("faults lock").clone();
        if let Some((status, body)) = faults.http_error {
            return Err(BackendError::Http { status, body });
        }
        if call < faults.transient_first {
            return Err(BackendError::Transient("injected timeout".into()));
        }
        if faults.fail_after.is_some_and(|k| call >= k) {
            return Err(BackendError::Fatal("injected crash".into()));
        }
        (0..req.n).map(|s| self.agent.respond(req, s)).collect()
    }
}

/// Responds from a fixed step → text table.
pub struct TableAgent {
    table: HashMap<StepId, String>,
    default: Option<String>,
}

impl TableAgent {
    pub fn new(table: HashMap<StepId, String>) -> Self {
        TableAgent { table, default: None }
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }
}

impl ScriptedAgent for TableAgent {
    fn respond(&self, req: &GenerationRequest, _sample: u32) -> Result<String, BackendError> {
        self.table
            .get(&req.meta.step)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::Fatal(format!("no scripted response for {}", req.meta.step)))
    }
}

/// When a [`PolicyAgent`] gets a step right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Oracle,
    AlwaysWrong,
    /// Right on even step indices.
    Alternating,
    /// Right with probability `p_correct`; correct points jitter by up to
    /// `jitter` per-mille per axis.
    Noisy { p_correct: f64, jitter: u16 },
    /// Right with probability `base + lift * (artifact share of history)`.
    HistorySensitive { base: f64, lift: f64 },
}

/// Emits the reference action or a wrong one according to a [`Policy`].
pub struct PolicyAgent {
    dialect: Dialect,
    gt: HashMap<StepId, Action>,
    policy: Policy,
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream of uniforms keyed by the parts.
struct Draws(u64);

impl Draws {
    fn new(parts: &[u64]) -> Self {
        Draws(parts.iter().fold(0x2545f4914f6cdd1d, |h, p| splitmix(h ^ p)))
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = splitmix(self.0);
        self.0
    }

    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

impl PolicyAgent {
    pub fn new(dialect: Dialect, episodes: &[Episode], policy: Policy) -> Self {
        let gt = episodes.iter().flat_map(|e| e.steps.iter().map(|s| (s.key(), s.gt_action.clone()))).collect();
        PolicyAgent { dialect, gt, policy }
    }

    fn draws(req: &GenerationRequest, sample: u32) -> Draws {
        let m = &req.meta;
        Draws::new(&[fnv(&m.step.episode_id), m.step.step_index as u64, m.round as u64, m.seed, sample as u64])
    }

    fn decide(&self, req: &GenerationRequest, sample: u32, gt: &Action) -> Action {
        let mut d = Self::draws(req, sample);
        let u = d.unit();
        let correct = match self.policy {
            Policy::Oracle => true,
            Policy::AlwaysWrong => false,
            Policy::Alternating => req.meta.step.step_index % 2 == 0,
            Policy::Noisy { p_correct, .. } => u < p_correct,
            Policy::HistorySensitive { base, lift } => {
                let h = &req.meta.history_sources;
                let share = if h.is_empty() { 0.0 } else { h.iter().filter(|b| **b).count() as f64 / h.len() as f64 };
                u < base + lift * share
            }
        };
        if !correct {
            return wrong_action(gt, &mut d);
        }
        match (self.policy, gt) {
            (Policy::Noisy { jitter, .. }, Action::Click { point }) if jitter > 0 => {
                Action::Click { point: jittered(*point, jitter, &mut d) }
            }
            (Policy::Noisy { jitter, .. }, Action::LongPress { point, duration_ms }) if jitter > 0 => {
                Action::LongPress { point: jittered(*point, jitter, &mut d), duration_ms: *duration_ms }
            }
            _ => gt.clone(),
        }
    }
}

fn jittered(p: Point, jitter: u16, d: &mut Draws) -> Point {
    let span = 2 * jitter as u64 + 1;
    let dx = d.below(span) as i64 - jitter as i64;
    let dy = d.below(span) as i64 - jitter as i64;
    Point::new((p.x as i64 + dx).clamp(0, 1000), (p.y as i64 + dy).clamp(0, 1000)).expect("clamped")
}

/// An action that never exact-matches `gt`: a different kind.
fn wrong_action(gt: &Action, d: &mut Draws) -> Action {
    let p = Point::new(d.below(1001) as i64, d.below(1001) as i64).expect("in range");
    let options = [
        Action::Click { point: p },
        Action::Scroll { point: p, direction: Direction::ALL[d.below(4) as usize] },
        Action::Wait { duration_ms: None },
    ];
    let start = d.below(3) as usize;
    (0..3).map(|i| &options[(start + i) % 3]).find(|a| a.kind() != gt.kind()).expect("three distinct kinds").clone()
}

/// Text a model speaking `dialect` would produce for `action`; only the
/// part after the prefix when a thought is pinned.
pub fn render_reply(dialect: &Dialect, req: &GenerationRequest, action: &Action) -> Result<String, BackendError> {
    let dims = req.meta.dims;
    let step = req.meta.step.step_index + 1;
    let body = dialect.render_action(action, dims).map_err(|e| BackendError::Fatal(e.to_string()))?;
    if req.fixed_thought.is_some() {
        return Ok(match dialect.id {
            DialectId::XmlToolcall => format!("<tool_call>\n{body}\n</tool_call>"),
            DialectId::ThoughtAction => format!(" {body}"),
            DialectId::PlainJson => body,
        });
    }
    let thought = format!("Step {step}: I should {}.", action.kind().as_str().to_lowercase());
    let conclusion = format!("performed {}", action);
    dialect
        .render_response(action, dialect.supports_thought().then_some(thought.as_str()), Some(&conclusion), dims)
        .map_err(|e| BackendError::Fatal(e.to_string()))
}

impl ScriptedAgent for PolicyAgent {
    fn respond(&self, req: &GenerationRequest, sample: u32) -> Result<String, BackendError> {
        let gt = self
            .gt
            .get(&req.meta.step)
            .ok_or_else(|| BackendError::Fatal(format!("unknown step {}", req.meta.step)))?;
        let mut action = self.decide(req, sample, gt);
        if !self.dialect.can_represent(&action) {
            action = Action::Wait { duration_ms: None };
        }
        render_reply(&self.dialect, req, &action)
    }
}

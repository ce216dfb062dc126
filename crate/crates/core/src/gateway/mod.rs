//! Generation interface over a chat-completions endpoint or a scripted mock:
//! request preparation, retries, bounded concurrency and a response cache.

mod cache;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheError, CacheKey, ResponseCache};

use crate::action::Dims;
use crate::dialect::{Dialect, DialectError, DialectId, FixedThought, HistoryEntry};
use crate::task::{StepId, StepTask};

/// Seeds used when a run does not specify its own list, one per round.
pub const DEFAULT_SEEDS: [u64; 8] = [7278727, 7779397, 7771087, 7867747, 7977857, 5113051, 9581717, 20000303];

pub const API_KEY_ENV: &str = "TRAJEVAL_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("observation for {step} cannot be resolved: {path}")]
    UnresolvableObservation { step: String, path: PathBuf },
    #[error(transparent)]
    Dialect(#[from] DialectError),
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    EndpointUnavailable { attempts: u32, last: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Failure reported by a backend for one attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transient(_) => true,
            BackendError::Http { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            BackendError::Fatal(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    /// -1 disables top-k.
    pub top_k: i64,
    pub repetition_penalty: f64,
    pub presence_penalty: f64,
    pub max_tokens: u32,
    pub n: u32,
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.0,
            top_p: 1.0,
            top_k: -1,
            repetition_penalty: 1.0,
            presence_penalty: 0.0,
            max_tokens: 2048,
            n: 1,
            seed: None,
        }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.top_k == 0 || self.top_k < -1 {
            return Err(format!("top_k {} must be -1 or positive", self.top_k));
        }
        if self.repetition_penalty <= 0.0 {
            return Err("repetition_penalty must be positive".into());
        }
        if !(-2.0..=2.0).contains(&self.presence_penalty) {
            return Err(format!("presence_penalty {} outside [-2, 2]", self.presence_penalty));
        }
        if self.max_tokens == 0 || self.n == 0 {
            return Err("max_tokens and n must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub sampling: Sampling,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "mock".into(),
            sampling: Sampling::default(),
            timeout_secs: 120.0,
            max_retries: 3,
            max_in_flight: 8,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::InvalidConfig("timeout must be positive".into()));
        }
        self.sampling.validate().map_err(GatewayError::InvalidConfig)
    }

    /// Hash of the settings that affect generated text.
    pub fn fingerprint(&self) -> String {
        digest(&(&self.model_name, &self.sampling))
    }
}

/// Hex sha256 of a value's JSON form.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digest input serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Part {
    Text { text: String },
    Image { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    fn text(role: Role, text: impl Into<String>) -> Self {
        Message { role, parts: vec![Part::Text { text: text.into() }] }
    }
}

/// Request metadata that never goes over the wire; mocks script on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub step: StepId,
    pub dims: Dims,
    pub round: u32,
    pub seed: u64,
    /// Per history position: rendered from an on-policy artifact.
    pub history_sources: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub dialect: DialectId,
    pub messages: Vec<Message>,
    pub enable_thinking: bool,
    pub fixed_thought: Option<FixedThought>,
    pub n: u32,
    pub meta: RequestMeta,
}

impl GenerationRequest {
    /// Digest of everything the model sees.
    pub fn prompt_digest(&self) -> String {
        digest(&(&self.dialect, &self.messages, self.enable_thinking, &self.fixed_thought, self.meta.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFlags {
    pub enable_thinking: bool,
    pub fixed_thought: Option<String>,
    /// Screenshots kept for the most recent history entries.
    pub image_budget: usize,
}

impl Default for PromptFlags {
    fn default() -> Self {
        PromptFlags { enable_thinking: true, fixed_thought: None, image_budget: 4 }
    }
}

fn system_prompt(dialect: &Dialect) -> String {
    match dialect.id {
        DialectId::XmlToolcall => "You are a GUI agent operating a mobile device. Think inside <thinking></thinking>, \
            then call the mobile_use tool inside <tool_call></tool_call>, then summarize the step inside \
            <conclusion></conclusion>. Coordinates are screenshot pixels."
            .into(),
        DialectId::ThoughtAction => "You are a GUI agent. Reply with `Thought: ...` followed by `Action: ...` using \
            click, long_press, type, scroll, open_app, drag, press_home, press_back, wait or finished. \
            Coordinates are in [0, 1000]."
            .into(),
        DialectId::PlainJson => "You are a GUI agent. Reply with a single JSON object with an `action` field \
            (CLICK, LONG_PRESS, SCROLL, TYPE, OPEN, PRESS, WAIT, STOP) and its parameters. \
            Coordinates are in [0, 1000]."
            .into(),
    }
}

fn instruction_block(step: &StepTask) -> String {
    let mut s = format!("Task: {}", step.instruction_high);
    if let Some(low) = &step.instruction_low {
        s.push_str(&format!("\nCurrent sub-goal: {low}"));
    }
    if let Some(desc) = &step.observation.text_desc {
        s.push_str(&format!("\nScreen description: {desc}"));
    }
    s
}

fn check_exists(step: &StepTask, path: &std::path::Path) -> Result<(), GatewayError> {
    if path.exists() {
        Ok(())
    } else {
        Err(GatewayError::UnresolvableObservation { step: step.key().to_string(), path: path.to_path_buf() })
    }
}

/// Build the request for one step. Only the newest `image_budget` history
/// entries keep their screenshot; older ones are text only.
pub fn prepare_input(
    step: &StepTask,
    history: &[HistoryEntry],
    dialect: &Dialect,
    flags: &PromptFlags,
    round: u32,
    seed: u64,
) -> Result<GenerationRequest, GatewayError> {
    check_exists(step, &step.observation.screenshot)?;
    let first_image = history.len().saturating_sub(flags.image_budget);
    for e in &history[first_image..] {
        check_exists(step, &e.screenshot)?;
    }
    let mut messages = vec![Message::text(Role::System, system_prompt(dialect))];
    match dialect.id {
        DialectId::ThoughtAction => {
            messages.push(Message::text(Role::User, instruction_block(step)));
            for (i, e) in history.iter().enumerate() {
                if i >= first_image {
                    messages.push(Message { role: Role::User, parts: vec![Part::Image { path: e.screenshot.clone() }] });
                }
                messages.push(Message::text(Role::Assistant, dialect.render_history_entry(e, i + 1)?));
            }
            messages.push(Message { role: Role::User, parts: vec![Part::Image { path: step.observation.screenshot.clone() }] });
        }
        DialectId::XmlToolcall | DialectId::PlainJson => {
            let mut parts = vec![Part::Text { text: instruction_block(step) }];
            let rendered = dialect.render_history(history)?;
            let progress = if rendered.is_empty() { "None".to_string() } else { rendered };
            parts.push(Part::Text {
                text: format!("Task progress (You have done the following operation on the current device): {progress}"),
            });
            for (i, e) in history.iter().enumerate().skip(first_image) {
                parts.push(Part::Text { text: format!("Screenshot after step {}:", i + 1) });
                parts.push(Part::Image { path: e.screenshot.clone() });
            }
            parts.push(Part::Text { text: "Current screenshot:".into() });
            parts.push(Part::Image { path: step.observation.screenshot.clone() });
            messages.push(Message { role: Role::User, parts });
        }
    }
    let fixed_thought = match &flags.fixed_thought {
        Some(t) => Some(dialect.render_fixed_thought(t)?),
        None => None,
    };
    Ok(GenerationRequest {
        dialect: dialect.id,
        messages,
        enable_thinking: flags.enable_thinking,
        fixed_thought,
        n: 1,
        meta: RequestMeta {
            step: step.key(),
            dims: step.observation.dims,
            round,
            seed,
            history_sources: history.iter().map(HistoryEntry::is_artifact).collect(),
        },
    })
}

/// Produces raw completions for a request. Continuations only: a fixed
/// thought prefix is prepended by the [`Gateway`].
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest, cfg: &EndpointConfig) -> Result<Vec<String>, BackendError>;
}

/// Counting semaphore bounding concurrent backend calls.
pub struct Admission {
    max: usize,
    state: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a> {
    owner: &'a Admission,
}

impl Admission {
    pub fn new(max: usize) -> Self {
        assert!(max >= 1);
        Admission { max, state: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.state.lock().expect("admission lock");
        while *n >= self.max {
            n = self.cv.wait(n).expect("admission lock");
        }
        *n += 1;
        Permit { owner: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.owner.state.lock().expect("admission lock");
        *n -= 1;
        self.owner.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cfg: EndpointConfig,
    fingerprint: String,
    cache: Arc<ResponseCache>,
    admission: Admission,
    calls: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cfg: EndpointConfig) -> Result<Self, GatewayError> {
        Self::with_cache(backend, cfg, Arc::new(ResponseCache::new()))
    }

    pub fn with_cache(backend: Arc<dyn Backend>, cfg: EndpointConfig, cache: Arc<ResponseCache>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Gateway {
            backend,
            fingerprint: cfg.fingerprint(),
            admission: Admission::new(cfg.max_in_flight),
            cfg,
            cache,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.calls.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            cache_misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn cache_key(&self, req: &GenerationRequest, sample: u32) -> CacheKey {
        CacheKey {
            step: format!("{}@{}", req.meta.step, &req.prompt_digest()[..16]),
            config_hash: self.fingerprint.clone(),
            round: req.meta.round,
            sample,
        }
    }

    /// Completions for `req`, in sample order. Cached samples are returned
    /// without touching the backend.
    pub fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let keys: Vec<CacheKey> = (0..req.n).map(|s| self.cache_key(req, s)).collect();
        let cached: Vec<Option<String>> = keys.iter().map(|k| self.cache.get(k)).collect();
        if cached.iter().all(Option::is_some) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(cached.into_iter().flatten().collect());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let raw = self.call_with_retries(req)?;
        if raw.len() != req.n as usize {
            return Err(GatewayError::Backend(format!("expected {} completions, got {}", req.n, raw.len())));
        }
        let prefix = req.fixed_thought.as_ref().map(|f| f.text.as_str()).unwrap_or("");
        // on a partial hit the cached samples win; only the gaps are stored
        let mut out = Vec::with_capacity(raw.len());
        for ((k, c), hit) in keys.into_iter().zip(raw).zip(cached) {
            match hit {
                Some(v) => out.push(v),
                None => {
                    let v = format!("{prefix}{c}");
                    self.cache.put(k, v.clone())?;
                    out.push(v);
                }
            }
        }
        Ok(out)
    }

    fn call_with_retries(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                debug!("retrying {} in {delay} ms (attempt {})", req.meta.step, attempt + 1);
                std::thread::sleep(Duration::from_millis(delay));
            }
            let result = {
                let _permit = self.admission.acquire();
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.backend.generate(req, &self.cfg)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    warn!("{}: attempt {} failed: {e}", req.meta.step, attempt + 1);
                    last = match e {
                        BackendError::Http { status, body } => format!("HTTP {status}: {body}"),
                        other => other.to_string(),
                    };
                }
                Err(BackendError::Http { status, body }) => return Err(GatewayError::Http { status, body }),
                Err(e) => return Err(GatewayError::Backend(e.to_string())),
            }
        }
        Err(GatewayError::EndpointUnavailable { attempts, last })
    }
}

//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionKind, KindSet, Metric};
use crate::analytics::{ClusterConfig, NoiseMode};
use crate::dialect::DialectId;
use crate::eval::{AggregatePolicy, MatchPolicy};
use crate::gateway::{digest, EndpointConfig, PromptFlags};
use crate::reward::{AdvantageConfig, RewardMode};
use crate::soeval::{Schedule, SoevalError, SweepConfig, Trend};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub min_comparable: f64,
    pub exclude_gt_kinds: Vec<ActionKind>,
    pub click_radius: f64,
    pub metric: Metric,
}

impl Default for PolicySection {
    fn default() -> Self {
        let m = MatchPolicy::default();
        PolicySection { min_comparable: 0.95, exclude_gt_kinds: Vec::new(), click_radius: m.click_radius, metric: m.metric }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub p_lb: f64,
    pub gap: f64,
    pub kappa: f64,
    pub mu: f64,
    pub trend: Trend,
    pub mask_seed: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { p_lb: 0.5, gap: 0.0, kappa: 16.0, mu: 0.5, trend: Trend::Increasing, mask_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dialect: DialectId,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub benchmarks: Vec<PathBuf>,
    pub enable_thinking: bool,
    pub image_budget: usize,
    pub endpoint: EndpointConfig,
    pub policy: PolicySection,
    pub schedule: ScheduleSection,
    pub sweep: SweepConfig,
    pub cluster: ClusterConfig,
    pub reward_mode: RewardMode,
    pub advantage: AdvantageConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dialect: DialectId::XmlToolcall,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            benchmarks: Vec::new(),
            enable_thinking: true,
            image_budget: PromptFlags::default().image_budget,
            endpoint: EndpointConfig::default(),
            policy: PolicySection::default(),
            schedule: ScheduleSection::default(),
            sweep: SweepConfig::default(),
            cluster: ClusterConfig::default(),
            reward_mode: RewardMode::Binary,
            advantage: AdvantageConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.policy.min_comparable) {
            return bad(format!("policy.min_comparable {} not in [0,1]", self.policy.min_comparable));
        }
        if !(self.policy.click_radius >= 0.0) {
            return bad(format!("policy.click_radius {} must be >= 0", self.policy.click_radius));
        }
        if !(self.cluster.eps > 0.0) || self.cluster.min_pts == 0 {
            return bad("cluster.eps must be > 0 and cluster.min_pts >= 1".into());
        }
        self.endpoint.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule().map_err(|e| ConfigError::Invalid(format!("schedule: {e}")))?;
        self.advantage.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn match_policy(&self) -> MatchPolicy {
        MatchPolicy { click_radius: self.policy.click_radius, metric: self.policy.metric }
    }

    pub fn aggregate_policy(&self) -> AggregatePolicy {
        AggregatePolicy {
            min_comparable: self.policy.min_comparable,
            exclude_gt_kinds: KindSet::from_kinds(self.policy.exclude_gt_kinds.iter().copied()),
        }
    }

    pub fn prompt_flags(&self) -> PromptFlags {
        PromptFlags { enable_thinking: self.enable_thinking, fixed_thought: None, image_budget: self.image_budget }
    }

    pub fn schedule(&self) -> Result<Schedule, SoevalError> {
        let s = &self.schedule;
        Schedule::new(s.p_lb, s.gap, s.kappa, s.mu, s.trend)
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.cluster.noise
    }

    /// Digest of every field that changes model outputs or scoring; run
    /// stores refuse to resume under a different hash.
    pub fn run_hash(&self) -> String {
        digest(&(
            self.dialect,
            &self.endpoint.fingerprint(),
            self.enable_thinking,
            self.image_budget,
            &self.policy,
            &self.schedule,
        ))
    }
}

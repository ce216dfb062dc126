use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Deserialize;

use trajeval::action::{Action, ActionKind, BBox, Metric};
use trajeval::analytics::{
    build_distribution, diversity, diversity_shift, effective_support, group_cells, stability, stability_level, stability_shift,
    wasserstein_norm, ExecutionSample, NoiseMode, RolloutLine,
};
use trajeval::config::Config;
use trajeval::dialect::{Dialect, DialectId};
use trajeval::eval::{aggregate, stratify_by_horizon, AggregateReport, ScoredStep};
use trajeval::fixtures::{write_fixture_benchmark, FixtureSpec};
use trajeval::gateway::mock::{render_reply, MockBackend, Policy, PolicyAgent, ScriptedAgent};
use trajeval::gateway::{digest, Backend, Gateway, GenerationRequest, ResponseCache};
use trajeval::judge::{detector_validation, judge_cases, load_cases, write_verdicts_csv, Judge};
use trajeval::report::{eval_table, fmt4, fmt_opt, horizon_table, Table};
use trajeval::reward::{reward, score_groups, RewardMode};
use trajeval::run_store::{read_records, RunStore};
use trajeval::runner::{rollout_episode, run_benchmark, HistoryMode, RunSetup};
use trajeval::soeval::{compute_osr, compute_osr_eligible, regime_sweep, solve_mu, write_sweep_csv, ArtifactPool, OnPolicyArtifact, Schedule};
use trajeval::stats::{fit_orientations, multi_seed_summary, spearman, wilson_interval, ConfusionMatrix, Contingency2x2, Z95};
use trajeval::task::{load_episodes, Episode, LoadOptions};

#[derive(Parser)]
#[command(name = "trajeval", version, about = "Offline and semi-online evaluation of GUI-agent trajectories")]
struct Cli {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    dialect: Option<String>,
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Maximum requests in flight.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    enable_thinking: Option<bool>,
    /// Answer with a scripted agent instead of an endpoint:
    /// oracle | always-wrong | alternating | noisy:<p>.
    #[arg(long, global = true)]
    mock: Option<MockSpec>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Debug)]
struct MockSpec {
    label: String,
    policy: Policy,
}

impl FromStr for MockSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let p = match s {
            "oracle" => Policy::Oracle,
            "always-wrong" => Policy::AlwaysWrong,
            "alternating" => Policy::Alternating,
            _ => match s.strip_prefix("noisy:").map(f64::from_str) {
                Some(Ok(p)) if (0.0..=1.0).contains(&p) => Policy::Noisy { p_correct: p, jitter: 20 },
                _ => return Err(format!("unknown mock policy `{s}`")),
            },
        };
        Ok(MockSpec { label: s.to_string(), policy: p })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark with placeholder screenshots.
    Fixture(FixtureArgs),
    /// Validate a benchmark file and list rejected records.
    Ingest(IngestArgs),
    /// Offline replay over reference histories.
    Eval(EvalArgs),
    /// Semi-online replay with live or pooled on-policy history.
    Soeval(SoevalArgs),
    /// Sample several completions per step and log them for clustering.
    Rollout(RolloutArgs),
    /// Decision distributions per step from a rollout log.
    Cluster(ClusterArgs),
    /// Reasoning-execution consistency verdicts from judge models.
    Judge(JudgeArgs),
    /// Replay under every schedule of the regime grid.
    Sweep(SweepArgs),
    /// Rewards and group-standardized advantages for scored samples.
    Reward(RewardArgs),
    /// Re-aggregate existing run directories.
    Report(ReportArgs),
    /// Statistical summaries of reference or measured tables.
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark JSONL files; defaults to the config's list.
    #[arg(long = "benchmark")]
    benchmarks: Vec<PathBuf>,
    /// Accept episodes whose screenshots are missing.
    #[arg(long)]
    no_screenshot_check: bool,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_delimiter = ',')]
    exclude_gt_kinds: Vec<String>,
    #[arg(long)]
    min_comparable: Option<f64>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 12)]
    episodes: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 9)]
    max_len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    truncated_share: f64,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    bench: BenchArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum OfflineMode {
    Offline,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "offline")]
    mode: OfflineMode,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Write the exact-matched outputs as an artifact pool.
    #[arg(long)]
    save_pool: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SoevalMode {
    Live,
    Pool,
}

#[derive(Args)]
struct SoevalArgs {
    #[arg(long, value_enum, default_value = "live")]
    mode: SoevalMode,
    /// Artifact pool for `--mode pool`.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Solve the schedule midpoint for this mean substitution probability.
    #[arg(long)]
    target_mean: Option<f64>,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    save_pool: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long, default_value_t = 32)]
    n: u32,
    /// Output JSONL; defaults to `<out-dir>/rollouts.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell name prefix, e.g. the condition being sampled.
    #[arg(long, default_value = "")]
    tag: String,
    #[command(flatten)]
    bench: BenchArgs,
}

#[derive(Args)]
struct ClusterArgs {
    /// Rollout JSONL.
    #[arg(long)]
    samples: PathBuf,
    /// Second rollout log; cells with the same name are compared.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    drop_noise: bool,
}

#[derive(Args)]
struct JudgeArgs {
    /// Consistency cases (JSONL).
    #[arg(long)]
    cases: PathBuf,
    /// Judge model names served at the endpoint; repeat per judge.
    #[arg(long = "judge-model")]
    judge_models: Vec<String>,
    #[arg(long, default_value_t = 32)]
    n: u32,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    samples_per_pair: Option<usize>,
    /// Artifact pool; the reference actions are used when absent.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[command(flatten)]
    bench: BenchArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardModeArg {
    Binary,
    Gaussian,
}

#[derive(Args)]
struct RewardArgs {
    /// JSONL with `group`, `prediction`, `gt_action` and optional `gt_bbox`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<RewardModeArg>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding `records.jsonl`.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Spearman ρ and Legendre R² of each metric column against `online`.
    Correlate {
        /// CSV with a name column, `online` and metric columns; defaults to the built-in table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Wilson score interval for k successes in n trials.
    Wilson {
        k: u64,
        n: u64,
    },
    /// 2×2 table: [match & consistent, match & inconsistent, miss & consistent, miss & inconsistent].
    Contingency {
        a: u64,
        b: u64,
        c: u64,
        d: u64,
    },
    /// Accuracy, TPR and TNR of a detector.
    Confusion {
        tp: u64,
        fn_: u64,
        fp: u64,
        tn: u64,
    },
    /// Mean and 95% t interval per row of a per-seed table.
    Seeds {
        /// CSV with a name column and one column per seed; defaults to the built-in table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("unknown {what} `{s}`"))
}

struct Ctx {
    cfg: Config,
    mock: Option<Policy>,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = &cli.seed_list {
            cfg.seeds = s.clone();
        }
        if let Some(d) = &cli.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(d) = &cli.dialect {
            cfg.dialect = parse_enum::<DialectId>(d, "dialect")?;
        }
        if let Some(u) = &cli.endpoint_url {
            cfg.endpoint.base_url = u.clone();
        }
        if let Some(m) = &cli.model {
            cfg.endpoint.model_name = m.clone();
        }
        if let Some(c) = cli.concurrency {
            cfg.endpoint.max_in_flight = c;
        }
        if let Some(t) = cli.enable_thinking {
            cfg.enable_thinking = t;
        }
        if let Some(m) = &cli.mock {
            // scripted agents must not share cache entries with each other or a real model
            cfg.endpoint.model_name = format!("mock:{}", m.label);
        }
        cfg.validate()?;
        Ok(Ctx { cfg, mock: cli.mock.as_ref().map(|m| m.policy) })
    }

    fn apply_policy(&mut self, p: &PolicyArgs) -> Result<()> {
        for k in &p.exclude_gt_kinds {
            self.cfg.policy.exclude_gt_kinds.push(parse_enum::<ActionKind>(&k.to_uppercase(), "action kind")?);
        }
        if let Some(m) = p.min_comparable {
            self.cfg.policy.min_comparable = m;
        }
        self.cfg.validate()?;
        Ok(())
    }

    fn dialect(&self) -> Dialect {
        Dialect::from_id(self.cfg.dialect)
    }

    fn setup(&self, seed: u64) -> RunSetup {
        let mut s = RunSetup::new(self.dialect());
        s.flags = self.cfg.prompt_flags();
        s.policy = self.cfg.match_policy();
        s.seed = seed;
        s
    }

    fn benchmarks(&self, b: &BenchArgs) -> Result<Vec<(String, Vec<Episode>)>> {
        let paths = if b.benchmarks.is_empty() { self.cfg.benchmarks.clone() } else { b.benchmarks.clone() };
        if paths.is_empty() {
            bail!("no benchmark given (use --benchmark or `benchmarks` in the config)");
        }
        let opts = LoadOptions { require_screenshots: !b.no_screenshot_check };
        paths
            .iter()
            .map(|p| {
                let report = load_episodes(p, &opts)?;
                for r in &report.rejections {
                    warn!("{}: rejected line {:?} episode {:?}: {}", p.display(), r.line, r.episode_id, r.reason);
                }
                let stem = p.file_stem().map_or_else(|| "benchmark".into(), |s| s.to_string_lossy().into_owned());
                info!("{}: {} episodes", p.display(), report.episodes.len());
                Ok((stem, report.episodes))
            })
            .collect()
    }

    fn backend(&self, agent: impl FnOnce() -> Arc<dyn ScriptedAgent>) -> Result<Arc<dyn Backend>> {
        if self.mock.is_some() {
            return Ok(Arc::new(MockBackend::new(agent())));
        }
        #[cfg(feature = "http")]
        {
            let key = std::env::var("TRAJEVAL_API_KEY").ok();
            Ok(Arc::new(trajeval::gateway::http::ChatCompletionsBackend::with_api_key(&self.cfg.endpoint, key)?))
        }
        #[cfg(not(feature = "http"))]
        bail!("built without the `http` feature; pass --mock")
    }

    fn gateway_with(&self, backend: Arc<dyn Backend>, endpoint: trajeval::gateway::EndpointConfig) -> Result<Gateway> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let cache = ResponseCache::open(&self.cfg.out_dir.join("response_cache.jsonl"))?;
        Ok(Gateway::with_cache(backend, endpoint, Arc::new(cache))?)
    }

    /// Gateway for replaying `episodes`; mock agents follow their references.
    fn gateway(&self, episodes: &[Episode]) -> Result<Gateway> {
        let backend = self.backend(|| {
            Arc::new(PolicyAgent::new(self.dialect(), episodes, self.mock.expect("mock policy"))) as Arc<dyn ScriptedAgent>
        })?;
        self.gateway_with(backend, self.cfg.endpoint.clone())
    }

    fn seeds(&self) -> &[u64] {
        &self.cfg.seeds
    }
}

fn scored(store: &Mutex<RunStore>) -> Vec<ScoredStep> {
    store.lock().expect("store lock").records().map(|r| r.scored()).collect()
}

fn emit(text: &str) {
    if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("stdout: {e}");
    }
}

fn print_table(t: &Table) {
    emit(&t.to_markdown());
}

/// Runs every benchmark × seed under `mode`, one resumable store each.
fn replay(ctx: &Ctx, bench: &BenchArgs, label: &str, extra_hash: &str, pool: Option<&ArtifactPool>, schedule: Option<&Schedule>, save_pool: Option<&Path>) -> Result<bool> {
    let hash = digest(&(ctx.cfg.run_hash(), label, extra_hash));
    let mut rows: Vec<(String, AggregateReport)> = Vec::new();
    let mut seed_rows = Table::new(["benchmark", "metric", "seeds", "mean", "sd", "ci_low", "ci_high"]);
    let mut osr_rows = Table::new(["run", "osr", "osr_eligible", "schedule_mean"]);
    let mut new_pool = ArtifactPool::new();
    let mut complete = true;
    for (stem, episodes) in ctx.benchmarks(bench)? {
        let gw = ctx.gateway(&episodes)?;
        let (mut progress, mut exact) = (Vec::new(), Vec::new());
        for &seed in ctx.seeds() {
            let dir = ctx.cfg.out_dir.join(label).join(&stem).join(format!("seed-{seed}"));
            let store = Mutex::new(RunStore::open(&dir, &hash, ctx.seeds())?);
            let mode = match (pool, schedule) {
                (Some(pool), Some(schedule)) => {
                    HistoryMode::Pool { pool, schedule, mask_seed: ctx.cfg.schedule.mask_seed ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) }
                }
                _ if label == "live" => HistoryMode::Live,
                _ => HistoryMode::Reference,
            };
            let run = run_benchmark(&gw, &episodes, &ctx.setup(seed), mode, Some(&store))?;
            if run.incomplete.is_empty() {
                store.lock().expect("store lock").finalize()?;
            } else {
                complete = false;
                warn!("{stem} seed {seed}: {} incomplete episodes; rerun to resume", run.incomplete.len());
            }
            let steps = scored(&store);
            if steps.is_empty() {
                continue;
            }
            let report = aggregate(&steps, &ctx.cfg.aggregate_policy())?;
            progress.push(report.all.progress);
            exact.push(report.all.exact_match);
            horizon_table(&stratify_by_horizon(&steps)).save(&dir, "horizon", &format!("{stem} {label} seed {seed}: exact match by horizon"))?;
            let store = store.into_inner().expect("store lock");
            if label != "offline" {
                let name = format!("{stem}/seed-{seed}");
                let osr = compute_osr(store.records()).ok();
                let eligible = compute_osr_eligible(store.records()).ok();
                osr_rows.push([name, fmt_opt(osr), fmt_opt(eligible), fmt_opt(schedule.map(Schedule::mean))]);
            }
            if save_pool.is_some() {
                for a in store.records().filter_map(OnPolicyArtifact::from_record) {
                    new_pool.insert(a);
                }
            }
            rows.push((format!("{stem}/{label}/seed-{seed}"), report));
        }
        if progress.len() > 1 {
            for (metric, values) in [("progress", &progress), ("exact_match", &exact)] {
                let s = multi_seed_summary(values)?;
                let (lo, hi) = s.ci.map_or((None, None), |(l, h)| (Some(l), Some(h)));
                seed_rows.push([stem.clone(), metric.into(), s.k.to_string(), fmt4(s.mean), fmt_opt(s.sd), fmt_opt(lo), fmt_opt(hi)]);
            }
        }
        let stats = gw.stats();
        info!("{stem}: gateway {stats:?}");
    }
    let out = ctx.cfg.out_dir.join(label);
    let table = eval_table(&rows);
    table.save(&out, "eval", &format!("{label} evaluation"))?;
    print_table(&table);
    if !seed_rows.rows.is_empty() {
        seed_rows.save(&out, "seeds", "Across seeds")?;
        print_table(&seed_rows);
    }
    if !osr_rows.rows.is_empty() {
        osr_rows.save(&out, "osr", "On-policy substitution rate")?;
        print_table(&osr_rows);
    }
    if let Some(p) = save_pool {
        new_pool.save(p)?;
        info!("pool: {} artifacts over {} steps -> {}", new_pool.len(), new_pool.steps(), p.display());
    }
    Ok(complete)
}

fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let spec = FixtureSpec {
        benchmark: a.name.clone(),
        episodes: a.episodes,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
        truncated_share: a.truncated_share,
        ..FixtureSpec::default()
    };
    let (path, eps) = write_fixture_benchmark(&spec, &a.out)?;
    println!("{} ({} episodes, {} steps)", path.display(), eps.len(), eps.iter().map(Episode::len).sum::<usize>());
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let paths = if a.bench.benchmarks.is_empty() { ctx.cfg.benchmarks.clone() } else { a.bench.benchmarks.clone() };
    let mut t = Table::new(["benchmark", "episodes", "steps", "truncated", "rejections"]);
    for p in &paths {
        let r = load_episodes(p, &LoadOptions { require_screenshots: !a.bench.no_screenshot_check })?;
        for rej in &r.rejections {
            println!("{}: line {:?} episode {:?}: {}", p.display(), rej.line, rej.episode_id, rej.reason);
        }
        let steps: usize = r.episodes.iter().map(Episode::len).sum();
        let trunc = r.episodes.iter().filter(|e| e.is_truncated()).count();
        t.push([p.display().to_string(), r.episodes.len().to_string(), steps.to_string(), trunc.to_string(), r.rejections.len().to_string()]);
    }
    print_table(&t);
    Ok(())
}

fn cmd_soeval(ctx: &mut Ctx, a: &SoevalArgs) -> Result<bool> {
    ctx.apply_policy(&a.policy)?;
    if a.mode == SoevalMode::Live {
        return replay(ctx, &a.bench, "live", "", None, None, a.save_pool.as_deref());
    }
    let path = a.pool.as_ref().context("--mode pool needs --pool (write one with `eval --save-pool`)")?;
    let pool = ArtifactPool::load(path).with_context(|| path.display().to_string())?;
    let s = &ctx.cfg.schedule;
    let mu = match a.target_mean {
        Some(t) => solve_mu(s.p_lb, s.gap, s.kappa, s.trend, t)?,
        None => s.mu,
    };
    let schedule = Schedule::new(s.p_lb, s.gap, s.kappa, mu, s.trend)?;
    let pool_hash = digest(&std::fs::read(path)?);
    replay(ctx, &a.bench, "pool", &digest(&(pool_hash, &schedule)), Some(&pool), Some(&schedule), a.save_pool.as_deref())
}

fn cmd_rollout(ctx: &Ctx, a: &RolloutArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| ctx.cfg.out_dir.join("rollouts.jsonl"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&out)?);
    let mut lines = 0usize;
    for (stem, episodes) in ctx.benchmarks(&a.bench)? {
        let gw = ctx.gateway(&episodes)?;
        for &seed in ctx.seeds() {
            for ep in &episodes {
                for rec in rollout_episode(&gw, ep, &ctx.setup(seed), a.n)? {
                    let step = &ep.steps[rec.key.step_index];
                    let line = RolloutLine {
                        cell: format!("{}{stem}/{}/{}", a.tag, ep.id, rec.key.step_index),
                        gt_action: step.gt_action.clone(),
                        gt_bbox: step.gt_bbox,
                        sample: ExecutionSample::from_record(&rec),
                    };
                    serde_json::to_writer(&mut w, &line)?;
                    w.write_all(b"\n")?;
                    lines += 1;
                }
            }
        }
    }
    w.flush()?;
    println!("{} samples -> {}", lines, out.display());
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| path.display().to_string())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

struct CellSummary {
    entropy: f64,
    stability: f64,
    dist: trajeval::analytics::DecisionDistribution,
}

fn summarize_cells(ctx: &Ctx, path: &Path) -> Result<BTreeMap<String, CellSummary>> {
    let policy = ctx.cfg.match_policy();
    group_cells(read_jsonl(path)?)
        .into_iter()
        .map(|(cell, (gt, bbox, samples))| {
            let dist = build_distribution(&samples, &ctx.cfg.cluster)?;
            let entropy = diversity(&dist)?;
            let stability = stability(&dist, &gt, bbox.as_ref(), &policy);
            Ok((cell, CellSummary { entropy, stability, dist }))
        })
        .collect()
}

fn cmd_cluster(ctx: &mut Ctx, a: &ClusterArgs) -> Result<()> {
    if let Some(e) = a.eps {
        ctx.cfg.cluster.eps = e;
    }
    if let Some(m) = &a.metric {
        ctx.cfg.cluster.metric = parse_enum::<Metric>(&m.to_uppercase(), "metric")?;
    }
    if a.drop_noise {
        ctx.cfg.cluster.noise = NoiseMode::Drop;
    }
    ctx.cfg.validate()?;
    let before = summarize_cells(ctx, &a.samples)?;
    let out = ctx.cfg.out_dir.join("cluster");
    let mut t = Table::new(["cell", "samples", "support", "entropy", "exp_entropy", "stability", "level", "top_decision", "top_mass"]);
    for (cell, s) in &before {
        let top = s.dist.decisions.first();
        t.push([
            cell.clone(),
            s.dist.n.to_string(),
            s.dist.support().to_string(),
            fmt4(s.entropy),
            fmt4(effective_support(s.entropy)),
            fmt4(s.stability),
            format!("{:?}", stability_level(s.stability)).to_lowercase(),
            top.and_then(|d| d.representative.as_ref()).map_or_else(|| "INVALID".into(), Action::canonical),
            top.map_or_else(|| "n/a".into(), |d| fmt4(d.mass)),
        ]);
    }
    t.save(&out, "decisions", "Decision distributions")?;
    print_table(&t);
    let Some(other) = &a.compare else { return Ok(()) };
    let after = summarize_cells(ctx, other)?;
    let mut shifts = Table::new(["cell", "exp_before", "exp_after", "delta_exp", "diversity_shift", "stability_before", "stability_after", "stability_shift", "w1_click"]);
    for (cell, b) in &before {
        let Some(x) = after.get(cell) else { continue };
        let d = diversity_shift(b.entropy, x.entropy);
        let (ma, mb) = (b.dist.spatial_measure(ActionKind::Click), x.dist.spatial_measure(ActionKind::Click));
        let w1 = if ma.is_empty() || mb.is_empty() { None } else { Some(wasserstein_norm(&ma, &mb)?) };
        shifts.push([
            cell.clone(),
            fmt4(b.entropy.exp()),
            fmt4(x.entropy.exp()),
            fmt4(d.delta_exp),
            d.category.as_str().into(),
            fmt4(b.stability),
            fmt4(x.stability),
            stability_shift(b.stability, x.stability).as_str().into(),
            fmt_opt(w1),
        ]);
    }
    shifts.save(&out, "shifts", "Decision shifts between conditions")?;
    print_table(&shifts);
    Ok(())
}

fn cmd_judge(ctx: &Ctx, a: &JudgeArgs) -> Result<()> {
    let cases = load_cases(&a.cases)?;
    let names = if a.judge_models.is_empty() { vec![ctx.cfg.endpoint.model_name.clone()] } else { a.judge_models.clone() };
    // mock judges reproduce the executed action, or a far-off click for wrong policies
    let executed: Arc<HashMap<String, Option<Action>>> = Arc::new(cases.iter().map(|c| (c.id.clone(), c.executed_action.clone())).collect());
    let gateways = names
        .iter()
        .map(|name| {
            let (d, exec, policy) = (ctx.dialect(), executed.clone(), ctx.mock);
            let backend = ctx.backend(move || {
                Arc::new(move |req: &GenerationRequest, _s: u32| {
                    let echo = exec.get(&req.meta.step.episode_id).cloned().flatten();
                    let a = match (policy, echo) {
                        (Some(Policy::Oracle), Some(a)) => a,
                        _ => Action::Wait { duration_ms: None },
                    };
                    render_reply(&d, req, &a)
                }) as Arc<dyn ScriptedAgent>
            })?;
            let mut ep = ctx.cfg.endpoint.clone();
            ep.model_name = name.clone();
            ctx.gateway_with(backend, ep)
        })
        .collect::<Result<Vec<_>>>()?;
    let judges: Vec<Judge<'_>> =
        names.iter().zip(&gateways).map(|(n, g)| Judge { name: n.clone(), gateway: g, dialect: ctx.dialect(), seed: ctx.seeds()[0] }).collect();
    let mut verdicts = Vec::new();
    for (c, r) in cases.iter().zip(judge_cases(&judges, &cases, a.n, &ctx.cfg.cluster, &ctx.cfg.match_policy())) {
        match r {
            Ok(v) => verdicts.push(v),
            Err(e) => warn!("case {}: {e}", c.id),
        }
    }
    let out = ctx.cfg.out_dir.join("judge");
    std::fs::create_dir_all(&out)?;
    write_verdicts_csv(File::create(out.join("verdicts.csv"))?, &verdicts)?;
    let inconsistent = verdicts.iter().filter(|v| !v.consistent).count();
    println!("{} verdicts, {} inconsistent -> {}", verdicts.len(), inconsistent, out.join("verdicts.csv").display());
    if cases.iter().any(|c| c.human_label.is_some()) {
        let r = detector_validation(&cases, &verdicts);
        let mut t = Table::new(["metric", "estimate", "ci_low", "ci_high"]);
        for (name, e) in [("accuracy", r.accuracy), ("tpr", r.tpr), ("tnr", r.tnr)] {
            let (lo, hi) = e.ci.map_or((None, None), |(l, h)| (Some(l), Some(h)));
            t.push([name.to_string(), fmt_opt(e.estimate), fmt_opt(lo), fmt_opt(hi)]);
        }
        t.save(&out, "detector", "Detector against human labels")?;
        print_table(&t);
    }
    Ok(())
}

fn cmd_sweep(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let sweep = &mut ctx.cfg.sweep;
    if let Some(k) = a.kappa {
        sweep.kappa = k;
    }
    if let Some(g) = a.grid {
        sweep.grid = g;
    }
    if let Some(s) = a.samples_per_pair {
        sweep.samples_per_pair = s;
    }
    let out = ctx.cfg.out_dir.join("sweep");
    std::fs::create_dir_all(&out)?;
    for (stem, episodes) in ctx.benchmarks(&a.bench)? {
        let pool = match &a.pool {
            Some(p) => ArtifactPool::load(p).with_context(|| p.display().to_string())?,
            None => ArtifactPool::oracle(&episodes),
        };
        let gw = ctx.gateway(&episodes)?;
        let points = regime_sweep(&gw, &episodes, &ctx.setup(ctx.seeds()[0]), &pool, &ctx.cfg.sweep)?;
        let path = out.join(format!("{stem}.csv"));
        write_sweep_csv(&points, File::create(&path)?)?;
        let mut by_regime: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &points {
            *by_regime.entry(p.regime.as_str()).or_default() += 1;
        }
        println!("{stem}: {} settings {by_regime:?} -> {}", points.len(), path.display());
    }
    Ok(())
}

#[derive(Deserialize)]
struct RewardItem {
    group: String,
    #[serde(default)]
    prediction: Option<Action>,
    gt_action: Action,
    #[serde(default)]
    gt_bbox: Option<BBox>,
}

fn cmd_reward(ctx: &Ctx, a: &RewardArgs) -> Result<()> {
    let mode = match a.mode {
        Some(RewardModeArg::Binary) => RewardMode::Binary,
        Some(RewardModeArg::Gaussian) => RewardMode::Gaussian,
        None => ctx.cfg.reward_mode,
    };
    let mut items: Vec<RewardItem> = read_jsonl(&a.input)?;
    items.sort_by(|x, y| x.group.cmp(&y.group));
    let policy = ctx.cfg.match_policy();
    let rewards: Vec<_> = items.iter().map(|i| reward(mode, i.prediction.as_ref(), &i.gt_action, i.gt_bbox.as_ref(), &policy)).collect();
    let rows: Vec<(String, f64)> = items.iter().zip(&rewards).map(|(i, r)| (i.group.clone(), r.total)).collect();
    let scored = score_groups(&rows, a.group_size.unwrap_or(ctx.cfg.advantage.group_size))?;
    let mut t = Table::new(["group", "r_type", "r_params", "reward", "advantage", "zero_variance"]);
    for (r, s) in rewards.iter().zip(&scored) {
        t.push([s.group.clone(), fmt4(r.r_type), fmt4(r.r_params), fmt4(s.reward), fmt4(s.advantage), s.zero_variance.to_string()]);
    }
    match &a.out {
        Some(p) => std::fs::write(p, t.to_csv())?,
        None => emit(&t.to_csv()),
    }
    Ok(())
}

fn cmd_report(ctx: &mut Ctx, a: &ReportArgs) -> Result<()> {
    ctx.apply_policy(&a.policy)?;
    let mut rows = Vec::new();
    for dir in &a.runs {
        let steps: Vec<ScoredStep> = read_records(dir)?.iter().map(|r| r.scored()).collect();
        rows.push((dir.display().to_string(), aggregate(&steps, &ctx.cfg.aggregate_policy())?));
    }
    let t = eval_table(&rows);
    t.save(&ctx.cfg.out_dir.join("report"), "eval", "Evaluation")?;
    print_table(&t);
    Ok(())
}

const AW_CORRELATION: &str = include_str!("../data/aw_correlation.csv");
const SEED_PROGRESS: &str = include_str!("../data/seed_progress.csv");

fn csv_rows(path: Option<&Path>, builtin: &'static str) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| p.display().to_string())?,
        None => builtin.to_string(),
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec.iter().skip(1).map(|v| v.trim().parse::<f64>().with_context(|| format!("not a number: `{v}`"))).collect::<Result<_>>()?;
        rows.push((rec[0].to_string(), values));
    }
    Ok((headers, rows))
}

fn cmd_stats(c: &StatsCmd) -> Result<()> {
    let mut t;
    match c {
        StatsCmd::Correlate { table } => {
            let (headers, rows) = csv_rows(table.as_deref(), AW_CORRELATION)?;
            let online_col = headers.iter().position(|h| h == "online").context("table needs an `online` column")?;
            let col = |j: usize| rows.iter().map(|r| r.1[j]).collect::<Vec<f64>>();
            let online = col(online_col);
            t = Table::new(["metric", "spearman", "r2_linear", "r2_quadratic_declared", "r2_quadratic_transposed"]);
            for (j, h) in headers.iter().enumerate().filter(|(j, _)| *j != online_col) {
                let x = col(j);
                let f = fit_orientations(&x, &online)?;
                t.push([h.clone(), fmt4(spearman(&x, &online)?), fmt4(f.linear), fmt4(f.declared), fmt4(f.transposed)]);
            }
        }
        StatsCmd::Wilson { k, n } => {
            let (lo, hi) = wilson_interval(*k, *n, Z95)?;
            t = Table::new(["k", "n", "rate", "ci_low", "ci_high"]);
            t.push([k.to_string(), n.to_string(), fmt4(*k as f64 / *n as f64), fmt4(lo), fmt4(hi)]);
        }
        StatsCmd::Contingency { a, b, c, d } => {
            let s = Contingency2x2 { a: *a, b: *b, c: *c, d: *d }.stats()?;
            t = Table::new(["statistic", "value"]);
            for (name, v) in [
                ("match_ratio_consistent_pct", s.match_ratio_consistent),
                ("match_ratio_inconsistent_pct", s.match_ratio_inconsistent),
                ("relative_risk", s.relative_risk),
                ("odds_ratio", s.odds_ratio),
                ("chi2", s.chi2),
                ("phi", s.phi),
            ] {
                t.push([name.to_string(), fmt_opt(v)]);
            }
        }
        StatsCmd::Confusion { tp, fn_, fp, tn } => {
            let m = ConfusionMatrix { tp: *tp, fn_: *fn_, fp: *fp, tn: *tn };
            t = Table::new(["metric", "value"]);
            for (name, v) in [("accuracy", m.accuracy()), ("tpr", m.tpr()), ("tnr", m.tnr())] {
                t.push([name.to_string(), fmt_opt(v)]);
            }
        }
        StatsCmd::Seeds { table } => {
            let (_, rows) = csv_rows(table.as_deref(), SEED_PROGRESS)?;
            t = Table::new(["row", "seeds", "mean", "sd", "ci_low", "ci_high"]);
            for (name, values) in rows {
                let s = multi_seed_summary(&values)?;
                let (lo, hi) = s.ci.map_or((None, None), |(l, h)| (Some(l), Some(h)));
                t.push([name, s.k.to_string(), fmt4(s.mean), fmt_opt(s.sd), fmt_opt(lo), fmt_opt(hi)]);
            }
        }
    }
    print_table(&t);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Stats(c) = &cli.cmd {
        cmd_stats(c)?;
        return Ok(true);
    }
    if let Command::Fixture(a) = &cli.cmd {
        cmd_fixture(a)?;
        return Ok(true);
    }
    let mut ctx = Ctx::new(&cli)?;
    match &cli.cmd {
        Command::Ingest(a) => cmd_ingest(&ctx, a)?,
        Command::Eval(a) => {
            ctx.apply_policy(&a.policy)?;
            let OfflineMode::Offline = a.mode;
            return replay(&ctx, &a.bench, "offline", "", None, None, a.save_pool.as_deref());
        }
        Command::Soeval(a) => return cmd_soeval(&mut ctx, a),
        Command::Rollout(a) => cmd_rollout(&ctx, a)?,
        Command::Cluster(a) => cmd_cluster(&mut ctx, a)?,
        Command::Judge(a) => cmd_judge(&ctx, a)?,
        Command::Sweep(a) => cmd_sweep(&mut ctx, a)?,
        Command::Reward(a) => cmd_reward(&ctx, a)?,
        Command::Report(a) => cmd_report(&mut ctx, a)?,
        Command::Stats(_) | Command::Fixture(_) => unreachable!(),
    }
    Ok(true)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => {}
        // incomplete episodes: rerunning resumes from the stores
        Ok(false) => std::process::exit(3),
        Err(e) => {
            // library errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

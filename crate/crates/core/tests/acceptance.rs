//! Acceptance suite. Prints one PASS/FAIL line per criterion, then the
//! failing sub-checks with their analysis. Exits non-zero when the set of
//! failing sub-checks differs from `KNOWN_DEVIATIONS` or a criterion
//! panics.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajeval::action::{spatial_distance, Action, Metric, Point};
use trajeval::analytics::{
    build_distribution, cluster_spatial, cluster_text, diversity, effective_support, pass_at_n, wasserstein_norm, ClusterConfig,
    ExecutionSample, TAU_LOOSE, TAU_STRICT,
};
use trajeval::dialect::Dialect;
use trajeval::eval::{evaluate_step_with, MatchPolicy};
use trajeval::fixtures::{generate_episodes, FixtureSpec};
use trajeval::gateway::mock::{Faults, MockBackend, Policy, PolicyAgent, ScriptedAgent};
use trajeval::gateway::{BackendError, EndpointConfig, Gateway, GenerationRequest};
use trajeval::reward::{clipped_term, group_advantages, reward_binary, AdvantageConfig};
use trajeval::run_store::{RunStore, RECORDS_FILE};
use trajeval::runner::{run_benchmark, HistoryMode, RunSetup};
use trajeval::soeval::{compute_osr, nlogi, sample_mask, sweep_settings, ArtifactPool, Regime, SweepConfig, Trend};
use trajeval::stats::{fit_orientations, multi_seed_summary, spearman, wilson_interval, ConfusionMatrix, Contingency2x2, Z95};
use trajeval::task::Episode;

/// Sub-checks that disagree with the reference figures. Each prints its
/// analysis; the run fails if this set grows or shrinks.
const KNOWN_DEVIATIONS: &[&str] = &[
    "c2.declared.soeval_em",
    "c2.declared.soeval_progress",
    "c3.accuracy.low",
    "c4.match_ratio_consistent",
];

const ONLINE: [f64; 6] = [13.0, 47.6, 52.0, 65.9, 66.4, 67.0];
const SOEVAL_EM: [f64; 6] = [55.93, 62.84, 57.66, 76.16, 67.37, 71.66];
const OFFLINE_EM: [f64; 6] = [56.68, 60.39, 54.52, 74.09, 65.49, 70.95];
const SOEVAL_PROGRESS: [f64; 6] = [8.19, 9.00, 8.40, 15.84, 12.01, 14.17];
const SEEDS_GUI_OWL_7B: [f64; 8] = [0.1892, 0.1932, 0.1858, 0.1916, 0.1868, 0.1968, 0.1898, 0.1883];
/// t quantile 0.975 with 7 degrees of freedom.
const T975_DF7: f64 = 2.364624251592785;

#[derive(Default)]
struct Criterion {
    failed: Vec<(String, String)>,
    notes: Vec<String>,
    checks: usize,
}

impl Criterion {
    fn check(&mut self, id: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks += 1;
        if !ok {
            self.failed.push((id.into(), detail.into()));
        }
    }

    /// Like `check`, keeping the detail as a note when it passes.
    fn measure(&mut self, id: impl Into<String>, ok: bool, detail: impl Into<String>) {
        let detail = detail.into();
        if ok {
            self.notes.push(detail.clone());
        }
        self.check(id, ok, detail);
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

// ---------------------------------------------------------------- oracles

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// 1 − 6Σd²/(n(n²−1)); the inputs have no ties.
fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64 + 1.0;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// R² of a least-squares polynomial in monomials, by normal equations and
/// Gaussian elimination on centered x.
fn poly_r2(x: &[f64], y: &[f64], degree: usize) -> f64 {
    let mx = mean(x);
    let k = degree + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (xi, yi) in x.iter().zip(y) {
        let pows: Vec<f64> = (0..k).map(|p| (xi - mx).powi(p as i32)).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][k] += pows[r] * yi;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..k).map(|r| a[r][k] / a[r][r]).collect();
    let my = mean(y);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let fit: f64 = beta.iter().enumerate().map(|(p, b)| b * (xi - mx).powi(p as i32)).sum();
        ss_res += (yi - fit).powi(2);
        ss_tot += (yi - my).powi(2);
    }
    1.0 - ss_res / ss_tot
}

fn wilson_oracle(k: f64, n: f64) -> (f64, f64) {
    let z = 1.959963984540054;
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    (center - half, center + half)
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

/// Union-find over core–core ε-edges; clusters numbered by lowest core
/// index; border points join the lowest adjacent cluster; noise points
/// become singletons in index order.
fn dbscan_oracle(points: &[Point], eps: f64, metric: Metric, min_pts: usize) -> Vec<usize> {
    let n = points.len();
    let adj = |i: usize, j: usize| spatial_distance(points[i], points[j], metric) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &[usize], mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && adj(i, j) {
                let (a, b) = (root(&parent, i), root(&parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut number: HashMap<usize, usize> = HashMap::new();
    let mut labels = vec![usize::MAX; n];
    for i in (0..n).filter(|&i| core[i]) {
        let next = number.len();
        labels[i] = *number.entry(root(&parent, i)).or_insert(next);
    }
    let dense = number.len();
    for i in (0..n).filter(|&i| !core[i]) {
        if let Some(l) = (0..n).filter(|&j| core[j] && adj(i, j)).map(|j| labels[j]).min() {
            labels[i] = l;
        }
    }
    let mut next = dense;
    for l in labels.iter_mut().filter(|l| **l == usize::MAX) {
        *l = next;
        next += 1;
    }
    labels
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    let centers: Vec<(i64, i64)> = (0..4).map(|_| (rng.gen_range(100..900), rng.gen_range(100..900))).collect();
    (0..n)
        .map(|_| {
            let (x, y) = if rng.gen_bool(0.7) {
                let (cx, cy) = centers[rng.gen_range(0..4)];
                (cx + rng.gen_range(-90..=90), cy + rng.gen_range(-90..=90))
            } else {
                (rng.gen_range(0..=1000), rng.gen_range(0..=1000))
            };
            Point::new(x.clamp(0, 1000), y.clamp(0, 1000)).unwrap()
        })
        .collect()
}

fn edit_distance(a: &str, b: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + (a[i - 1] != b[j - 1]) as usize);
        }
        prev = cur;
    }
    let m = a.len().max(b.len());
    if m == 0 {
        0.0
    } else {
        prev[b.len()] as f64 / m as f64
    }
}

/// Two-stage text clustering written out step by step: containment with a
/// loose distance bound first, else the nearest prototype under the strict
/// bound, else a new prototype.
fn text_oracle(xs: &[&str]) -> Vec<usize> {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut protos: Vec<&str> = Vec::new();
    let mut labels = Vec::new();
    for &x in xs {
        let contained = protos.iter().position(|p| {
            let (nx, np) = (norm(x), norm(p));
            (nx.contains(&np) || np.contains(&nx)) && edit_distance(x, p) <= 0.3
        });
        let label = contained.or_else(|| {
            let mut best: Option<(usize, f64)> = None;
            for (j, p) in protos.iter().enumerate() {
                let d = edit_distance(x, p);
                if d <= 0.1 && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|b| b.0)
        });
        labels.push(label.unwrap_or_else(|| {
            protos.push(x);
            protos.len() - 1
        }));
    }
    labels
}

const PROTOTYPES: [&str; 12] = [
    "There will be a Science Fair in our city next month.",
    "There will be a Science Fair at Lincoln High School tomorrow.",
    "There will be a great science fair event this Sunday.",
    "Science Fair will come soon",
    "There will be a Science Fair Event next week.",
    "There will be a science fair held in our school tomorrow",
    "m so happy today",
    "m so happy today because my family came together",
    "m",
    "I'm tired",
    "I am really happy today because it's my birthday!",
    "I am alone",
];

fn fast_gateway(agent: Arc<dyn ScriptedAgent>) -> Gateway {
    Gateway::new(Arc::new(MockBackend::new(agent)), EndpointConfig { backoff_ms: 0, max_retries: 0, ..Default::default() }).unwrap()
}

fn fixture(dir: &Path, episodes: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Episode> {
    generate_episodes(&FixtureSpec { episodes, min_len, max_len, seed, ..Default::default() }, dir).unwrap()
}

// --------------------------------------------------------------- criteria

fn c1(c: &mut Criterion) {
    for (name, metric, expected) in [("soeval_em", SOEVAL_EM, 0.7714), ("offline_em", OFFLINE_EM, 0.6571), ("soeval_progress", SOEVAL_PROGRESS, 0.7714)] {
        let rho = spearman(&metric, &ONLINE).unwrap();
        let oracle = spearman_no_ties(&metric, &ONLINE);
        c.check(format!("c1.{name}"), f4(rho) == f4(expected), format!("{name}: rho {rho:.6}, reference {expected}"));
        c.check(format!("c1.oracle.{name}"), (rho - oracle).abs() < 1e-12, format!("{name}: rho {rho} vs rank-difference formula {oracle}"));
    }
}

fn c2(c: &mut Criterion) {
    for (name, metric, expected) in [("soeval_em", SOEVAL_EM, 0.6241), ("offline_em", OFFLINE_EM, 0.4821), ("soeval_progress", SOEVAL_PROGRESS, 0.5377)] {
        let f = fit_orientations(&metric, &ONLINE).unwrap();
        let (decl, trans, lin) = (poly_r2(&metric, &ONLINE, 2), poly_r2(&ONLINE, &metric, 2), poly_r2(&metric, &ONLINE, 1));
        c.check(
            format!("c2.oracle.{name}"),
            (f.declared - decl).abs() < 1e-9 && (f.transposed - trans).abs() < 1e-9 && (f.linear - lin).abs() < 1e-9,
            format!("{name}: fit ({}, {}, {}) vs normal equations ({decl}, {trans}, {lin})", f.declared, f.transposed, f.linear),
        );
        c.check(
            format!("c2.declared.{name}"),
            (f.declared - expected).abs() <= 0.05,
            format!(
                "{name}: quadratic R² with y = online success, x = metric is {:.4}; transposed (y = metric, x = online) is {:.4}; reference {expected}",
                f.declared, f.transposed
            ),
        );
        c.check(format!("c2.degree1.{name}"), f4(f.linear) == f4(expected), format!("{name}: linear R² {:.4} vs reference {expected}", f.linear));
        c.note(format!(
            "{name}: declared {:.4}, transposed {:.4}, linear {:.4} (reference {expected})",
            f.declared, f.transposed, f.linear
        ));
    }
    c.note("the reference R² values equal the degree-1 fit to 4 decimals in every column; the degree-2 fit matches in neither orientation");
}

fn c3(c: &mut Criterion) {
    for (name, k, n, lo_p, hi_p) in [("accuracy", 582, 648, 0.873, 0.919), ("tpr", 273, 324, 0.799, 0.878), ("tnr", 309, 324, 0.925, 0.972)] {
        let (lo, hi) = wilson_interval(k, n, Z95).unwrap();
        let (olo, ohi) = wilson_oracle(k as f64, n as f64);
        c.check(format!("c3.oracle.{name}"), (lo - olo).abs() < 1e-12 && (hi - ohi).abs() < 1e-12, format!("{name}: ({lo}, {hi}) vs ({olo}, {ohi})"));
        for (side, v, p) in [("low", lo, lo_p), ("high", hi, hi_p)] {
            let ok = (round_to(v, 3) - p).abs() < 1e-9;
            let twice = round_to(round_to(v, 4), 3);
            c.check(
                format!("c3.{name}.{side}"),
                ok,
                format!("{name} {k}/{n} {side} bound {v:.5} rounds to {:.3}, reference {p:.3}; rounding the 4-decimal value {:.4} again gives {twice:.3}", round_to(v, 3), round_to(v, 4)),
            );
        }
    }
}

fn c4(c: &mut Criterion) {
    let t = Contingency2x2 { a: 5531, b: 456, c: 1976, d: 2037 };
    let s = t.stats().unwrap();
    let (a, b, cc, d): (f64, f64, f64, f64) = (5531.0, 456.0, 1976.0, 2037.0);
    let n = a + b + cc + d;
    let (r1, r2) = (a / (a + cc), b / (b + d));
    let oracle = [
        100.0 * r1,
        100.0 * r2,
        r1 / r2,
        a * d / (b * cc),
        n * (a * d - b * cc).powi(2) / ((a + b) * (cc + d) * (a + cc) * (b + d)),
        (a * d - b * cc) / ((a + b) * (cc + d) * (a + cc) * (b + d)).sqrt(),
    ];
    let got = [s.match_ratio_consistent, s.match_ratio_inconsistent, s.relative_risk, s.odds_ratio, s.chi2, s.phi].map(Option::unwrap);
    c.check("c4.oracle", got.iter().zip(&oracle).all(|(g, o)| (g - o).abs() < 1e-9), format!("{got:?} vs {oracle:?}"));
    let mrc = got[0];
    c.check(
        "c4.match_ratio_consistent",
        format!("{mrc:.2}") == "73.70",
        format!("5531/7507 = {mrc:.4}% prints as {mrc:.2}, reference 73.70"),
    );
    c.check("c4.match_ratio_inconsistent", format!("{:.2}", got[1]) == "18.29", format!("{:.4}", got[1]));
    c.check("c4.relative_risk", (got[2] - 4.03).abs() <= 0.01, format!("{:.4}", got[2]));
    c.check("c4.odds_ratio", (got[3] - 12.50).abs() <= 0.01, format!("{:.4}", got[3]));
    c.check("c4.chi2", (got[4] - 2389.58).abs() <= 2.0, format!("{:.3}", got[4]));
    c.check("c4.phi", (got[5] - 0.489).abs() <= 0.001, format!("{:.5}", got[5]));
}

fn c5(c: &mut Criterion) {
    let m = ConfusionMatrix { tp: 273, fn_: 51, fp: 15, tn: 309 };
    for (name, v, o, p) in [
        ("accuracy", m.accuracy(), 582.0 / 648.0, "0.8981"),
        ("tpr", m.tpr(), 273.0 / 324.0, "0.8426"),
        ("tnr", m.tnr(), 309.0 / 324.0, "0.9537"),
    ] {
        let v = v.unwrap();
        c.check(format!("c5.{name}"), f4(v) == p && (v - o).abs() < 1e-15, format!("{name} {v} vs reference {p}"));
    }
}

fn c6(c: &mut Criterion) {
    let s = multi_seed_summary(&SEEDS_GUI_OWL_7B).unwrap();
    let m = mean(&SEEDS_GUI_OWL_7B);
    let sd = (SEEDS_GUI_OWL_7B.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 7.0).sqrt();
    let half = T975_DF7 * sd / 8f64.sqrt();
    let (lo, hi) = s.ci.unwrap();
    c.check("c6.oracle", (s.mean - m).abs() < 1e-15 && (lo - (m - half)).abs() < 1e-9 && (hi - (m + half)).abs() < 1e-9, format!("{s:?}"));
    c.check("c6.mean", f4(s.mean) == "0.1902", f4(s.mean));
    c.check("c6.ci", f4(lo) == "0.1872" && f4(hi) == "0.1932", format!("[{}, {}]", f4(lo), f4(hi)));
    let z = 1.959963984540054 * sd / 8f64.sqrt();
    c.note(format!("interval uses the t quantile with 7 df; the normal quantile would give [{}, {}]", f4(m - z), f4(m + z)));
}

fn c7(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let mut mismatches = 0;
    for _ in 0..100 {
        let pts = random_points(&mut rng, 200);
        for eps in [30.0, 70.0, 90.0, 140.0] {
            for metric in [Metric::L1, Metric::L2] {
                if cluster_spatial(&pts, eps, metric, 3).labels != dbscan_oracle(&pts, eps, metric, 3) {
                    mismatches += 1;
                }
            }
        }
    }
    c.measure("c7.dbscan", mismatches == 0, format!("{mismatches} of 800 instances differ from the oracle"));

    let protos = cluster_text(&PROTOTYPES, TAU_LOOSE, TAU_STRICT);
    c.check("c7.prototypes_distinct", protos.prototypes == (0..12).collect::<Vec<_>>(), format!("{:?}", protos.labels));
    c.check("c7.happy_variants", protos.labels[6] != protos.labels[7], format!("{:?}", &protos.labels[6..8]));
    let mut xs: Vec<&str> = PROTOTYPES.to_vec();
    xs.extend(["M so  happy today", "There will be a Science Fair in our city next month", "I'm tired.", "I am alone!", "m so happy"]);
    let got = cluster_text(&xs, TAU_LOOSE, TAU_STRICT).labels;
    c.check("c7.text_oracle", got == text_oracle(&xs), format!("{got:?} vs {:?}", text_oracle(&xs)));
}

fn c8(c: &mut Criterion) {
    let settings = sweep_settings(&SweepConfig::default()).unwrap();
    let pairs: BTreeSet<(u64, u64)> = settings.iter().map(|s| (s.p_start.to_bits(), s.p_end.to_bits())).collect();
    let per = |r: Regime| settings.iter().filter(|s| s.regime == r).count() / 50;
    let shape = (settings.len(), pairs.len(), per(Regime::Increasing), per(Regime::Decreasing), per(Regime::Stationary));
    c.check("c8.shape", shape == (800, 16, 6, 6, 4), format!("(settings, configs, inc, dec, stat) = {shape:?}"));

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst = (0.0f64, 0usize);
    let mut min_positions = usize::MAX;
    for s in &settings {
        let (mut used, mut total) = (0usize, 0usize);
        for _ in 0..100 {
            let m = sample_mask(200, &s.schedule, &mut rng);
            used += m.iter().filter(|b| **b).count();
            total += m.len();
        }
        min_positions = min_positions.min(total);
        let dev = (used as f64 / total as f64 - s.target_mean).abs();
        if dev > worst.0 {
            worst = (dev, s.index);
        }
    }
    c.measure("c8.osr_masks", worst.0 < 0.02 && min_positions >= 10_000, format!("max |OSR − target| {:.4} at setting {}, {min_positions} positions each", worst.0, worst.1));

    // the same through the runner: one setting per grid pair, oracle pool
    let dir = tempfile::tempdir().unwrap();
    let eps = fixture(dir.path(), 2, 150, 150, 3);
    let d = Dialect::plain_json();
    let gw = fast_gateway(Arc::new(PolicyAgent::new(d, &eps, Policy::Oracle)));
    let pool = ArtifactPool::oracle(&eps);
    let mut worst = (0.0f64, 0usize, 0usize);
    for s in settings.iter().step_by(50) {
        let run = run_benchmark(&gw, &eps, &RunSetup::new(d), HistoryMode::Pool { pool: &pool, schedule: &s.schedule, mask_seed: s.index as u64 }, None).unwrap();
        let positions: usize = run.records().map(|r| r.history_mask.len()).sum();
        let dev = (compute_osr(run.records()).unwrap() - s.target_mean).abs();
        if dev >= worst.0 {
            worst = (dev, s.index, positions);
        }
    }
    c.measure("c8.osr_runs", worst.0 < 0.02 && worst.2 >= 10_000, format!("max |OSR − target| {:.4} at setting {} over {} positions", worst.0, worst.1, worst.2));

    let (mut endpoint, mut mono, mut complement) = (0.0f64, true, 0.0f64);
    for kappa in [0.5, 1.0, 4.0, 8.0, 16.0] {
        for mu in [0.05, 0.25, 0.5, 0.75, 0.95] {
            let f = |x: f64, t: Trend| nlogi(x, kappa, mu, t).unwrap();
            endpoint = endpoint
                .max(f(0.0, Trend::Increasing).abs())
                .max((f(1.0, Trend::Increasing) - 1.0).abs())
                .max((f(0.0, Trend::Decreasing) - 1.0).abs())
                .max(f(1.0, Trend::Decreasing).abs());
            let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
            let mut prev = -1.0;
            for k in 0..=1000 {
                let x = k as f64 / 1000.0;
                let up = f(x, Trend::Increasing);
                let oracle = (sig(kappa * (x - mu)) - sig(-kappa * mu)) / (sig(kappa * (1.0 - mu)) - sig(-kappa * mu));
                complement = complement.max((up + f(x, Trend::Decreasing) - 1.0).abs()).max((up - oracle).abs());
                mono &= up >= prev;
                prev = up;
            }
        }
    }
    c.measure("c8.nlogi", endpoint < 1e-12 && complement < 1e-12 && mono, format!("endpoint error {endpoint:e}, complement/oracle error {complement:e}, monotone {mono}"));
}

/// Alternating agent that logs the history sources it was shown.
struct Logged {
    inner: PolicyAgent,
    seen: Mutex<HashMap<(String, usize), Vec<bool>>>,
}

impl ScriptedAgent for Logged {
    fn respond(&self, req: &GenerationRequest, sample: u32) -> Result<String, BackendError> {
        let k = (req.meta.step.episode_id.clone(), req.meta.step.step_index);
        self.seen.lock().unwrap().insert(k, req.meta.history_sources.clone());
        self.inner.respond(req, sample)
    }
}

fn c9(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let eps = fixture(dir.path(), 1000, 2, 8, 99);
    let d = Dialect::xml_toolcall();
    let agent = Arc::new(Logged { inner: PolicyAgent::new(d, &eps, Policy::Alternating), seen: Mutex::new(HashMap::new()) });
    let run = run_benchmark(&fast_gateway(agent.clone()), &eps, &RunSetup::new(d), HistoryMode::Live, None).unwrap();
    let seen = agent.seen.lock().unwrap();
    let (mut positions, mut substituted, mut violations) = (0usize, 0usize, 0usize);
    for o in &run.outcomes {
        for r in &o.records {
            let expected: Vec<bool> = o.records[..r.key.step_index].iter().map(|p| p.evaluation.exact_match).collect();
            let shown = &seen[&(r.key.episode_id.clone(), r.key.step_index)];
            positions += expected.len();
            substituted += r.history_mask.iter().filter(|b| **b).count();
            violations += expected.iter().zip(&r.history_mask).zip(shown).filter(|((e, m), s)| e != m || m != s).count();
        }
    }
    c.measure(
        "c9.psi_gate",
        run.outcomes.len() == 1000 && violations == 0 && substituted > 0 && substituted < positions,
        format!("{} episodes, {positions} history positions, {substituted} substituted, {violations} violations", run.outcomes.len()),
    );
}

fn c10(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let eps = fixture(dir.path(), 40, 3, 9, 10);
    let policy = MatchPolicy::default();
    let (mut steps, mut disagree) = (0usize, 0usize);
    for s in eps.iter().flat_map(|e| &e.steps) {
        let off = match &s.gt_action {
            Action::Click { point } => Action::Click { point: Point::new((point.x as i64 + 150) % 1001, point.y as i64).unwrap() },
            _ => Action::Wait { duration_ms: Some(1) },
        };
        for pred in [Some(s.gt_action.clone()), Some(off), None] {
            let r = reward_binary(pred.as_ref(), &s.gt_action, s.gt_bbox.as_ref(), &policy);
            let expected = match &pred {
                Some(p) => {
                    let e = evaluate_step_with(p, &s.gt_action, s.gt_bbox.as_ref(), &policy);
                    e.type_match as u8 as f64 + e.exact_match as u8 as f64
                }
                None => 0.0,
            };
            steps += 1;
            disagree += (r.total != expected) as usize;
        }
    }
    c.measure("c10.reward_vs_evaluator", disagree == 0, format!("{disagree} of {steps} scored predictions disagree"));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let r: Vec<f64> = (0..16).map(|_| rng.gen_range(0..=2) as f64 + rng.gen::<f64>() * rng.gen_range(0..=1) as f64).collect();
        let g = group_advantages(&r, 16).unwrap();
        if g.zero_variance {
            continue;
        }
        let m = mean(&g.advantages);
        let sd = (g.advantages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0).sqrt();
        worst = worst.max(m.abs()).max((sd - 1.0).abs());
    }
    c.check("c10.advantages", worst < 1e-12, format!("max |mean|, |std − 1| = {worst:e}"));

    let cfg = AdvantageConfig { eps_low: 0.2, eps_high: 0.3, ..Default::default() };
    let hand = [((0.5, 1.0), 0.5), ((1.0, 1.0), 1.0), ((2.0, 1.0), 1.3), ((0.5, -1.0), -0.8), ((1.0, -1.0), -1.0), ((2.0, -1.0), -2.0)];
    let bad: Vec<String> = hand
        .iter()
        .filter(|((r, a), v)| (clipped_term(*r, *a, &cfg) - v).abs() > 1e-12)
        .map(|((r, a), v)| format!("({r}, {a}) -> {} expected {v}", clipped_term(*r, *a, &cfg)))
        .collect();
    c.check("c10.clipped_term", bad.is_empty(), bad.join("; "));
}

fn c11(c: &mut Criterion) {
    let mut worst = 0.0f64;
    for m in 1..=12usize {
        let samples: Vec<ExecutionSample> = (0..m)
            .flat_map(|k| (0..3).map(move |j| Point::new(40 + 80 * k as i64 + j, 500).unwrap()))
            .map(|point| ExecutionSample::parsed(Action::Click { point }))
            .collect();
        let dist = build_distribution(&samples, &ClusterConfig::default()).unwrap();
        let h = diversity(&dist).unwrap();
        worst = worst.max((h - (m as f64).ln()).abs()).max((effective_support(h) - m as f64).abs());
    }
    c.check("c11.entropy", worst < 1e-12, format!("max error {worst:e} over m = 1..12"));
    let v: Vec<f64> = (0..=8).map(|n| pass_at_n(8, 2, n).unwrap()).collect();
    c.check("c11.pass_monotone", v.windows(2).all(|w| w[1] >= w[0]), format!("{v:?}"));
    c.check("c11.pass_8_2_4", f4(v[4]) == "0.7857" && (v[4] - (1.0 - 15.0 / 70.0)).abs() < 1e-12, f4(v[4]));
    let w = wasserstein_norm(&[(Point::new(0, 0).unwrap(), 1.0)], &[(Point::new(1000, 1000).unwrap(), 1.0)]).unwrap();
    c.check("c11.w1_diameter", (w - 1.0).abs() < 1e-12, format!("{w}"));
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_trajeval")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn c12(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bench = root.join("bench");
    let s = |p: &Path| p.display().to_string();
    cli(&["fixture", "--out", &s(&bench), "--episodes", "8"]).unwrap();
    let file = s(&bench.join("episodes.jsonl"));
    let config = root.join("run.toml");
    std::fs::write(&config, "[schedule]\np_lb = 0.2\ngap = 0.6\nkappa = 8.0\ntrend = \"increasing\"\n").unwrap();
    let config = s(&config);
    let pipeline = |out: &Path| -> Result<(), String> {
        let o = s(out);
        let pool = s(&out.join("pool.jsonl"));
        let common = ["--config", config.as_str(), "--mock", "noisy:0.7", "--seed-list", "1,2", "--out-dir", o.as_str()];
        let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|s| s.to_string()).collect() };
        cli(&with(&["eval", "--benchmark", &file, "--save-pool", &pool]))?;
        cli(&with(&["soeval", "--mode", "live", "--benchmark", &file]))?;
        cli(&with(&["soeval", "--mode", "pool", "--pool", &pool, "--target-mean", "0.4", "--benchmark", &file]))
    };
    let (a, b) = (root.join("a"), root.join("b"));
    let ran = pipeline(&a).and_then(|_| pipeline(&b));
    c.check("c12.cli_runs", ran.is_ok(), format!("{ran:?}"));
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let differing: Vec<&String> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    c.measure(
        "c12.byte_identical",
        ta.len() == tb.len() && ta.len() > 20 && differing.is_empty(),
        format!("{} vs {} files, differing: {differing:?}", ta.len(), tb.len()),
    );

    // resume after a mid-run failure: no step is generated twice
    let eps = fixture(&root.join("resume"), 6, 3, 9, 12);
    let total: usize = eps.iter().map(Episode::len).sum();
    let d = Dialect::xml_toolcall();
    let setup = RunSetup::new(d);
    let agent: Arc<dyn ScriptedAgent> = Arc::new(PolicyAgent::new(d, &eps, Policy::Noisy { p_correct: 0.7, jitter: 20 }));
    let cfg = EndpointConfig { backoff_ms: 0, max_retries: 0, ..Default::default() };
    let run_dir = root.join("resume-run");
    let first = Arc::new(MockBackend::new(agent.clone()).with_faults(Faults { fail_after: Some(total / 2), ..Default::default() }));
    {
        let store = Mutex::new(RunStore::open(&run_dir, "h", &[0]).unwrap());
        let run = run_benchmark(&Gateway::new(first.clone(), cfg.clone()).unwrap(), &eps, &setup, HistoryMode::Live, Some(&store)).unwrap();
        c.check("c12.interrupted", !run.incomplete.is_empty(), format!("{} incomplete", run.incomplete.len()));
    }
    let stored = RunStore::open(&run_dir, "h", &[0]).unwrap().len();
    let second = Arc::new(MockBackend::new(agent.clone()));
    let store = Mutex::new(RunStore::open(&run_dir, "h", &[0]).unwrap());
    let run = run_benchmark(&Gateway::new(second.clone(), cfg.clone()).unwrap(), &eps, &setup, HistoryMode::Live, Some(&store)).unwrap();
    store.lock().unwrap().finalize().unwrap();
    c.measure(
        "c12.resume",
        run.incomplete.is_empty() && second.calls() == total - stored && stored > 0,
        format!("{stored} steps stored before resume, {} generated after, {total} total", second.calls()),
    );
    let third = Arc::new(MockBackend::new(agent.clone()));
    let store = Mutex::new(RunStore::open(&run_dir, "h", &[0]).unwrap());
    run_benchmark(&Gateway::new(third.clone(), cfg.clone()).unwrap(), &eps, &setup, HistoryMode::Live, Some(&store)).unwrap();
    c.check("c12.rerun_finished", third.calls() == 0, format!("{} calls on a finished store", third.calls()));

    let clean_dir = root.join("clean-run");
    let clean = Mutex::new(RunStore::open(&clean_dir, "h", &[0]).unwrap());
    run_benchmark(&Gateway::new(Arc::new(MockBackend::new(agent)), cfg).unwrap(), &eps, &setup, HistoryMode::Live, Some(&clean)).unwrap();
    clean.lock().unwrap().finalize().unwrap();
    c.check(
        "c12.resumed_equals_clean",
        std::fs::read(run_dir.join(RECORDS_FILE)).unwrap() == std::fs::read(clean_dir.join(RECORDS_FILE)).unwrap(),
        "records of the resumed run differ from an uninterrupted run",
    );
}

fn main() {
    let criteria: [(&str, fn(&mut Criterion)); 12] = [
        ("Spearman reproduction", c1),
        ("Legendre R² reproduction", c2),
        ("Wilson CI reproduction", c3),
        ("Contingency reproduction", c4),
        ("Confusion-matrix rates", c5),
        ("Multi-seed summary", c6),
        ("Clustering oracle equivalence", c7),
        ("Regime sweep shape", c8),
        ("ψ-gate audit", c9),
        ("Reward/advantage suite", c10),
        ("Decision-metric identities", c11),
        ("End-to-end determinism", c12),
    ];
    let start = Instant::now();
    let mut failing: BTreeSet<String> = BTreeSet::new();
    let mut panicked = Vec::new();
    let mut report = String::new();
    for (i, (title, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let mut c = Criterion::default();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut c)));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                println!("FAIL  {:>2}  {title}  (panicked: {msg})", i + 1);
                panicked.push(i + 1);
            }
            Ok(()) if c.failed.is_empty() => println!("PASS  {:>2}  {title}  ({} checks, {secs:.1}s)", i + 1, c.checks),
            Ok(()) => {
                let ids: Vec<&str> = c.failed.iter().map(|f| f.0.as_str()).collect();
                println!("FAIL  {:>2}  {title}  ({} of {} checks failed: {}, {secs:.1}s)", i + 1, ids.len(), c.checks, ids.join(", "));
            }
        }
        for (id, detail) in &c.failed {
            report.push_str(&format!("  [{}] {id}: {detail}\n", i + 1));
            failing.insert(id.clone());
        }
        for n in &c.notes {
            report.push_str(&format!("  [{}] note: {n}\n", i + 1));
        }
    }
    print!("\n{report}");
    let known: BTreeSet<String> = KNOWN_DEVIATIONS.iter().map(|s| s.to_string()).collect();
    let unexpected: Vec<&String> = failing.difference(&known).collect();
    let vanished: Vec<&String> = known.difference(&failing).collect();
    println!("\n{:.1}s total; failing sub-checks: {}", start.elapsed().as_secs_f64(), failing.len());
    if !unexpected.is_empty() || !vanished.is_empty() || !panicked.is_empty() {
        println!("unexpected failures: {unexpected:?}; deviations no longer observed: {vanished:?}; panicked: {panicked:?}");
        std::process::exit(1);
    }
    println!("only the documented deviations failed");
}

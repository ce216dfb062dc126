//! Rank correlation, Legendre least-squares fits, interval estimates and
//! 2×2 table statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("constant series: correlation undefined")]
    Constant,
    #[error("x values span a single point")]
    DegenerateSpan,
    #[error("invalid counts: {0}")]
    Counts(String),
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew { need: 3, got: xs.len() });
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Legendre polynomials P0..=Pdegree at t.
fn legendre_basis(t: f64, degree: usize) -> Vec<f64> {
    let mut p = vec![1.0, t];
    for k in 1..degree {
        let k = k as f64;
        let next = ((2.0 * k + 1.0) * t * p[k as usize] - k * p[k as usize - 1]) / (k + 1.0);
        p.push(next);
    }
    p.truncate(degree + 1);
    p
}

/// R² of the least-squares fit of `ys` on Legendre polynomials up to
/// `degree` in `xs` mapped affinely onto [−1, 1].
pub fn legendre_r2(xs: &[f64], ys: &[f64], degree: usize) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < degree + 2 {
        return Err(StatsError::TooFew { need: degree + 2, got: xs.len() });
    }
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi - lo <= 0.0 {
        return Err(StatsError::DegenerateSpan);
    }
    let n = xs.len();
    let design = DMatrix::from_fn(n, degree + 1, |i, j| legendre_basis(2.0 * (xs[i] - lo) / (hi - lo) - 1.0, degree)[j]);
    let y = DVector::from_column_slice(ys);
    let coef = design.clone().svd(true, true).solve(&y, 1e-12).map_err(|_| StatsError::DegenerateSpan)?;
    let resid = &y - &design * coef;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok(1.0 - resid.norm_squared() / ss_tot)
}

pub fn legendre2_r2(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    legendre_r2(xs, ys, 2)
}

/// Degree-2 R² in both orientations, plus the orientation-free linear R².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOrientations {
    /// y = online success, x = offline metric.
    pub declared: f64,
    /// y = offline metric, x = online success.
    pub transposed: f64,
    pub linear: f64,
}

pub fn fit_orientations(metric: &[f64], online: &[f64]) -> Result<FitOrientations, StatsError> {
    Ok(FitOrientations {
        declared: legendre2_r2(metric, online)?,
        transposed: legendre2_r2(online, metric)?,
        linear: legendre_r2(metric, online, 1)?,
    })
}

pub const Z95: f64 = 1.959963984540054;

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || successes > n {
        return Err(StatsError::Counts(format!("{successes}/{n}")));
    }
    let (k, n) = (successes as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes as f64 == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// a: consistent ∧ success, b: inconsistent ∧ success,
/// c: consistent ∧ failure, d: inconsistent ∧ failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContingencyStats {
    /// Success percentage among consistent samples.
    pub match_ratio_consistent: Option<f64>,
    pub match_ratio_inconsistent: Option<f64>,
    pub relative_risk: Option<f64>,
    pub odds_ratio: Option<f64>,
    /// Pearson χ², no continuity correction.
    pub chi2: Option<f64>,
    pub phi: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

impl Contingency2x2 {
    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn stats(&self) -> Result<ContingencyStats, StatsError> {
        let n = self.n();
        if n == 0 {
            return Err(StatsError::Counts("empty table".into()));
        }
        let [a, b, c, d] = [self.a, self.b, self.c, self.d].map(|v| v as f64);
        let p1 = ratio(a, a + c);
        let p2 = ratio(b, b + d);
        let margins = (a + b) * (c + d) * (a + c) * (b + d);
        let chi2 = ratio(n as f64 * (a * d - b * c).powi(2), margins);
        Ok(ContingencyStats {
            match_ratio_consistent: p1.map(|p| 100.0 * p),
            match_ratio_inconsistent: p2.map(|p| 100.0 * p),
            relative_risk: p1.zip(p2).and_then(|(p1, p2)| ratio(p1, p2)),
            odds_ratio: ratio(a * d, b * c),
            chi2,
            phi: chi2.map(|x| (x / n as f64).sqrt()),
        })
    }
}

/// Rows are human labels, columns detector predictions; positive means
/// consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = ConfusionMatrix::default();
        for (label, pred) in pairs {
            match (label, pred) {
                (true, true) => m.tp += 1,
                (true, false) => m.fn_ += 1,
                (false, true) => m.fp += 1,
                (false, false) => m.tn += 1,
            }
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio((self.tp + self.tn) as f64, self.total() as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn as f64, (self.tn + self.fp) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for one seed.
    pub sd: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

/// Mean and 95% interval mean ± t₀.₉₇₅,ₖ₋₁·sd/√k over per-seed values.
pub fn multi_seed_summary(values: &[f64]) -> Result<SeedSummary, StatsError> {
    let k = values.len();
    if k == 0 {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return Ok(SeedSummary { k, mean, sd: None, ci: None });
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    let half = t * sd / (k as f64).sqrt();
    Ok(SeedSummary { k, mean, sd: Some(sd), ci: Some((mean - half, mean + half)) })
}

//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Every export wraps a plain function that returns `Result<_, String>` so
//! the logic runs under `cargo test` without a JS host.

use trajeval::action::{BBox, Metric, Point};
use trajeval::analytics::{cluster_spatial, effective_support, entropy};
use trajeval::reward::reward_gaussian_click;
use trajeval::soeval::{Schedule, Trend};
use wasm_bindgen::prelude::*;

fn trend(increasing: bool) -> Trend {
    if increasing {
        Trend::Increasing
    } else {
        Trend::Decreasing
    }
}

/// p(sr) = p_lb + gap·nlogi(sr) at `samples` evenly spaced ratios in
/// [0, 1], followed by the schedule mean as the last element.
pub fn schedule_curve(p_lb: f64, gap: f64, kappa: f64, mu: f64, increasing: bool, samples: usize) -> Result<Vec<f64>, String> {
    if samples < 2 {
        return Err(format!("need at least 2 samples, got {samples}"));
    }
    let s = Schedule::new(p_lb, gap, kappa, mu, trend(increasing)).map_err(|e| e.to_string())?;
    let mut out: Vec<f64> = (0..samples).map(|i| s.at_ratio(i as f64 / (samples - 1) as f64)).collect();
    out.push(s.mean());
    Ok(out)
}

/// Clustering of per-mille clicks given as flat `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickClusters {
    pub labels: Vec<u32>,
    pub noise: Vec<bool>,
    pub dense: usize,
    /// Shannon entropy (nats) of the cluster masses.
    pub entropy: f64,
}

pub fn cluster_clicks(xy: &[i32], eps: f64, l1: bool, min_pts: usize) -> Result<ClickClusters, String> {
    if xy.len() % 2 != 0 {
        return Err("coordinates must come in pairs".into());
    }
    if !(eps > 0.0) || min_pts == 0 {
        return Err(format!("need eps > 0 and min_pts ≥ 1, got {eps} / {min_pts}"));
    }
    let points = xy
        .chunks(2)
        .map(|c| Point::new(c[0] as i64, c[1] as i64).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let c = cluster_spatial(&points, eps, if l1 { Metric::L1 } else { Metric::L2 }, min_pts);
    let mut counts = vec![0usize; c.clusters()];
    for &l in &c.labels {
        counts[l] += 1;
    }
    let n = points.len().max(1) as f64;
    let masses: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
    Ok(ClickClusters { labels: c.labels.iter().map(|&l| l as u32).collect(), noise: c.noise, dense: c.dense, entropy: entropy(&masses) })
}

/// Gaussian click reward on a `res`×`res` grid spanning [0, 1000]², row
/// major with y down.
pub fn reward_field(x1: i32, y1: i32, x2: i32, y2: i32, res: usize) -> Result<Vec<f64>, String> {
    if res < 2 {
        return Err(format!("need res ≥ 2, got {res}"));
    }
    let bbox = BBox::new(x1 as i64, y1 as i64, x2 as i64, y2 as i64).map_err(|e| e.to_string())?;
    let step = 1000.0 / (res - 1) as f64;
    let mut out = Vec::with_capacity(res * res);
    for r in 0..res {
        for c in 0..res {
            out.push(reward_gaussian_click((c as f64 * step).round(), (r as f64 * step).round(), &bbox));
        }
    }
    Ok(out)
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve_js(p_lb: f64, gap: f64, kappa: f64, mu: f64, increasing: bool, samples: usize) -> Result<Vec<f64>, JsError> {
    schedule_curve(p_lb, gap, kappa, mu, increasing, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct Clusters {
    inner: ClickClusters,
}

#[wasm_bindgen]
impl Clusters {
    #[wasm_bindgen(getter)]
    pub fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    /// 1 for noise points, 0 otherwise.
    #[wasm_bindgen(getter)]
    pub fn noise(&self) -> Vec<u8> {
        self.inner.noise.iter().map(|&b| b as u8).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn dense(&self) -> usize {
        self.inner.dense
    }

    #[wasm_bindgen(getter)]
    pub fn entropy(&self) -> f64 {
        self.inner.entropy
    }

    #[wasm_bindgen(getter, js_name = effectiveSupport)]
    pub fn effective_support(&self) -> f64 {
        effective_support(self.inner.entropy)
    }
}

#[wasm_bindgen(js_name = clusterClicks)]
pub fn cluster_clicks_js(xy: &[i32], eps: f64, l1: bool, min_pts: usize) -> Result<Clusters, JsError> {
    cluster_clicks(xy, eps, l1, min_pts).map(|inner| Clusters { inner }).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rewardField)]
pub fn reward_field_js(x1: i32, y1: i32, x2: i32, y2: i32, res: usize) -> Result<Vec<f64>, JsError> {
    reward_field(x1, y1, x2, y2, res).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn curve_spans_the_schedule() {
        let c = schedule_curve(0.2, 0.6, 16.0, 0.5, true, 101).unwrap();
        assert_eq!(c.len(), 102);
        assert!((c[0] - 0.2).abs() < 1e-12 && (c[100] - 0.8).abs() < 1e-12);
        assert!((c[50] - 0.5).abs() < 1e-12);
        assert!((c[101] - 0.5).abs() < 1e-3, "symmetric curve has mean 0.5");
        let d = schedule_curve(0.2, 0.6, 16.0, 0.5, false, 3).unwrap();
        assert!((d[0] - 0.8).abs() < 1e-12 && (d[2] - 0.2).abs() < 1e-12);
        assert!(schedule_curve(0.5, 0.6, 16.0, 0.5, true, 3).is_err());
        assert!(schedule_curve(0.2, 0.6, 16.0, 0.5, true, 1).is_err());
    }

    #[test]
    fn two_blobs_and_a_stray() {
        let xy = [100, 100, 110, 100, 100, 110, 800, 800, 805, 800, 800, 805, 500, 500];
        let c = cluster_clicks(&xy, 30.0, false, 3).unwrap();
        assert_eq!(c.labels, vec![0, 0, 0, 1, 1, 1, 2]);
        assert_eq!(c.dense, 2);
        assert_eq!(c.noise, vec![false, false, false, false, false, false, true]);
        let expected = -(2.0 * (3.0 / 7.0) * (3.0f64 / 7.0).ln() + (1.0 / 7.0) * (1.0f64 / 7.0).ln());
        assert!((c.entropy - expected).abs() < 1e-12);
        assert!(cluster_clicks(&[1, 2, 3], 30.0, false, 3).is_err());
        assert!(cluster_clicks(&[1, 2000], 30.0, false, 3).is_err());
        assert_eq!(cluster_clicks(&[], 30.0, true, 3).unwrap().entropy, 0.0);
    }

    #[test]
    fn field_peaks_at_box_center() {
        let f = reward_field(400, 400, 600, 600, 11).unwrap();
        assert_eq!(f.len(), 121);
        assert_eq!(f[5 * 11 + 5], 1.0);
        // one σ (50) off center is ruled out by the grid step; 100 off is 2σ
        assert!((f[5 * 11 + 6] - (-2.0f64).exp()).abs() < 1e-12);
        assert!(reward_field(600, 400, 400, 600, 11).is_err());
    }

    proptest! {
        #[test]
        fn curve_is_monotone(p_lb in 0.0..0.5f64, gap in 0.0..0.5f64, kappa in 0.5..32.0f64, mu in 0.05..0.95f64, inc: bool) {
            let c = schedule_curve(p_lb, gap, kappa, mu, inc, 64).unwrap();
            for w in c[..64].windows(2) {
                if inc { prop_assert!(w[1] >= w[0] - 1e-12) } else { prop_assert!(w[1] <= w[0] + 1e-12) }
            }
            prop_assert!(c[64] >= p_lb - 1e-12 && c[64] <= p_lb + gap + 1e-12);
        }

        #[test]
        fn field_is_a_unit_bump(x1 in 0..900i32, y1 in 0..900i32, w in 2..100i32, h in 2..100i32) {
            let f = reward_field(x1, y1, x1 + w, y1 + h, 21).unwrap();
            prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

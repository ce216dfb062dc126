//! Benchmark episodes: the canonical line-delimited episode format, loading
//! with validation, and writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{Action, ActionKind, BBox, Button, Dims, Direction, Point};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read episode file {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("cannot write episode file {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub screenshot: PathBuf,
    pub text_desc: Option<String>,
    pub dims: Dims,
}

/// One reference step: instruction, observation and ground-truth action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTask {
    pub episode_id: String,
    pub step_index: usize,
    pub instruction_high: String,
    pub instruction_low: Option<String>,
    pub observation: Observation,
    pub gt_action: Action,
    pub gt_bbox: Option<BBox>,
}

impl StepTask {
    pub fn key(&self) -> StepId {
        StepId { episode_id: self.episode_id.clone(), step_index: self.step_index }
    }
}

/// Identifies a reference step independent of run parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepId {
    pub episode_id: String,
    pub step_index: usize,
}

impl std::fmt::Display for StepId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.episode_id, self.step_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub app: String,
    pub device: String,
    pub benchmark: String,
    pub split: String,
    pub steps: Vec<StepTask>,
    /// Extra per-step metadata fields carried through untouched, indexed by step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<BTreeMap<String, Value>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// An episode whose reference never reaches STOP.
    pub fn is_truncated(&self) -> bool {
        self.steps.last().map_or(true, |s| s.gt_action.kind() != ActionKind::Stop)
    }
}

/// Wire form of one step line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLine {
    pub episode_id: String,
    pub step_index: usize,
    pub app: String,
    pub device: String,
    pub benchmark: String,
    pub split: String,
    pub instruction_high: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_low: Option<String>,
    pub screenshot_path: String,
    pub img_w: f64,
    pub img_h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen_desc: Option<String>,
    pub gt_kind: String,
    #[serde(default)]
    pub gt_params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<BBoxLine>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BBoxLine {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

/// Why a record or an episode was rejected.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub line: Option<usize>,
    pub episode_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub episodes: Vec<Episode>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Reject episodes whose screenshots do not exist on disk.
    pub require_screenshots: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { require_screenshots: true }
    }
}

fn point_param(params: &Value, key: &str) -> Result<Option<Point>, String> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(xs)) if xs.len() == 2 => {
            let coord = |v: &Value| v.as_i64().ok_or_else(|| format!("`{key}` must hold integers"));
            Point::new(coord(&xs[0])?, coord(&xs[1])?).map(Some).map_err(|e| e.to_string())
        }
        Some(other) => Err(format!("`{key}` must be [x, y], got {other}")),
    }
}

fn str_param<'a>(params: &'a Value, key: &str) -> Result<&'a str, String> {
    params.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing string parameter `{key}`"))
}

fn opt_u32(params: &Value, key: &str) -> Result<Option<u32>, String> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .map(Some)
            .ok_or_else(|| format!("`{key}` must be a non-negative integer")),
    }
}

/// Decode `gt_kind` + `gt_params` into an [`Action`]. Ground-truth points are per-mille.
pub fn decode_gt(kind: &str, params: &Value) -> Result<Action, String> {
    let kind: ActionKind = kind.parse().map_err(|e: crate::action::ActionError| e.to_string())?;
    let need_point = |key: &str| point_param(params, key)?.ok_or_else(|| format!("missing `{key}`"));
    Ok(match kind {
        ActionKind::Click => Action::Click { point: need_point("point")? },
        ActionKind::LongPress => Action::LongPress { point: need_point("point")?, duration_ms: opt_u32(params, "duration")? },
        ActionKind::Scroll => Action::Scroll {
            // direction-only ground truth scrolls from the screen center
            point: point_param(params, "point")?.unwrap_or(Point { x: 500, y: 500 }),
            direction: str_param(params, "direction")?.parse::<Direction>().map_err(|e| e.to_string())?,
        },
        ActionKind::Type => Action::Type {
            text: str_param(params, "text")?.to_string(),
            submit: params.get("submit").and_then(Value::as_bool).unwrap_or(false),
        },
        ActionKind::Open => Action::Open { app: str_param(params, "app")?.to_string() },
        ActionKind::Press => {
            Action::Press { button: str_param(params, "button")?.parse::<Button>().map_err(|e| e.to_string())? }
        }
        ActionKind::Wait => Action::Wait { duration_ms: opt_u32(params, "duration")? },
        ActionKind::Stop => Action::Stop {
            status: params.get("status").and_then(Value::as_str).unwrap_or("finish").to_string(),
        },
    })
}

/// Inverse of [`decode_gt`].
pub fn encode_gt(action: &Action) -> (String, Value) {
    use serde_json::json;
    let params = match action {
        Action::Click { point } => json!({"point": [point.x, point.y]}),
        Action::LongPress { point, duration_ms } => match duration_ms {
            Some(d) => json!({"point": [point.x, point.y], "duration": d}),
            None => json!({"point": [point.x, point.y]}),
        },
        Action::Scroll { point, direction } => json!({"point": [point.x, point.y], "direction": direction.as_str()}),
        Action::Type { text, submit } => {
            if *submit {
                json!({"text": text, "submit": true})
            } else {
                json!({"text": text})
            }
        }
        Action::Open { app } => json!({"app": app}),
        Action::Press { button } => json!({"button": button.as_str()}),
        Action::Wait { duration_ms } => match duration_ms {
            Some(d) => json!({"duration": d}),
            None => json!({}),
        },
        Action::Stop { status } => json!({"status": status}),
    };
    (action.kind().as_str().to_string(), params)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Pending {
    first_line: usize,
    meta: (String, String, String, String),
    steps: Vec<(usize, StepTask, BTreeMap<String, Value>)>,
    broken: Option<Rejection>,
}

fn line_to_step(line: &StepLine, base: &Path) -> Result<StepTask, String> {
    let dims = Dims::new(line.img_w, line.img_h).map_err(|e| e.to_string())?;
    let gt_action = decode_gt(&line.gt_kind, &line.gt_params)?;
    let gt_bbox = match line.gt_bbox {
        None => None,
        Some(b) => {
            if !gt_action.kind().is_spatial() {
                return Err(format!("gt_bbox given for non-clickable kind {}", gt_action.kind()));
            }
            let bbox = BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| e.to_string())?;
            if bbox.is_degenerate() {
                log::warn!("degenerate gt_bbox for {}#{}", line.episode_id, line.step_index);
            }
            Some(bbox)
        }
    };
    Ok(StepTask {
        episode_id: line.episode_id.clone(),
        step_index: line.step_index,
        instruction_high: line.instruction_high.clone(),
        instruction_low: line.instruction_low.clone(),
        observation: Observation {
            screenshot: resolve(base, &line.screenshot_path),
            text_desc: line.screen_desc.clone(),
            dims,
        },
        gt_action,
        gt_bbox,
    })
}

/// Load and validate an episode file. Invalid records and the episodes they
/// belong to are reported in [`LoadReport::rejections`], never dropped silently.
pub fn load_episodes(path: &Path, opts: &LoadOptions) -> Result<LoadReport, TaskError> {
    let file = File::open(path).map_err(|source| TaskError::Unreadable { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut report = LoadReport::default();
    let mut pending: BTreeMap<String, Pending> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| TaskError::Unreadable { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StepLine = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                let episode_id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("episode_id").and_then(Value::as_str).map(str::to_string));
                let rej = Rejection { line: Some(lineno), episode_id: episode_id.clone(), reason: format!("schema violation: {e}") };
                match episode_id.and_then(|id| pending.get_mut(&id)) {
                    Some(p) if p.broken.is_none() => p.broken = Some(rej),
                    _ => report.rejections.push(rej),
                }
                continue;
            }
        };
        let meta = (parsed.app.clone(), parsed.device.clone(), parsed.benchmark.clone(), parsed.split.clone());
        let entry = pending.entry(parsed.episode_id.clone()).or_insert_with(|| {
            order.push(parsed.episode_id.clone());
            Pending { first_line: lineno, meta: meta.clone(), steps: Vec::new(), broken: None }
        });
        if entry.broken.is_some() {
            continue;
        }
        let reject = |reason: String| Rejection { line: Some(lineno), episode_id: Some(parsed.episode_id.clone()), reason };
        if entry.meta != meta {
            entry.broken = Some(reject("episode metadata differs between steps".into()));
            continue;
        }
        match line_to_step(&parsed, &base) {
            Ok(step) => {
                if opts.require_screenshots && !step.observation.screenshot.exists() {
                    entry.broken = Some(reject(format!("unresolvable screenshot {}", step.observation.screenshot.display())));
                    continue;
                }
                entry.steps.push((lineno, step, parsed.extra.clone()));
            }
            Err(reason) => entry.broken = Some(reject(reason)),
        }
    }

    for id in order {
        let mut p = pending.remove(&id).expect("tracked episode");
        if let Some(rej) = p.broken {
            report.rejections.push(rej);
            continue;
        }
        p.steps.sort_by_key(|(_, s, _)| s.step_index);
        let indices: Vec<usize> = p.steps.iter().map(|(_, s, _)| s.step_index).collect();
        let expected: Vec<usize> = (0..indices.len()).collect();
        if indices != expected {
            let unique: BTreeSet<usize> = indices.iter().copied().collect();
            let reason = if unique.len() != indices.len() { "duplicate step_index" } else { "non-contiguous steps" };
            report.rejections.push(Rejection { line: Some(p.first_line), episode_id: Some(id), reason: reason.into() });
            continue;
        }
        let (app, device, benchmark, split) = p.meta;
        let has_extra = p.steps.iter().any(|(_, _, e)| !e.is_empty());
        let extra = if has_extra { p.steps.iter().map(|(_, _, e)| e.clone()).collect() } else { Vec::new() };
        let episode = Episode { id, app, device, benchmark, split, steps: p.steps.into_iter().map(|(_, s, _)| s).collect(), extra };
        if episode.is_truncated() {
            log::info!("episode {} has no terminal STOP; excluded from episode success", episode.id);
        }
        report.episodes.push(episode);
    }
    Ok(report)
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

pub fn episode_to_lines(ep: &Episode, base: &Path) -> Vec<StepLine> {
    ep.steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (gt_kind, gt_params) = encode_gt(&s.gt_action);
            StepLine {
                episode_id: ep.id.clone(),
                step_index: s.step_index,
                app: ep.app.clone(),
                device: ep.device.clone(),
                benchmark: ep.benchmark.clone(),
                split: ep.split.clone(),
                instruction_high: s.instruction_high.clone(),
                instruction_low: s.instruction_low.clone(),
                screenshot_path: relative_to(&s.observation.screenshot, base),
                img_w: s.observation.dims.width,
                img_h: s.observation.dims.height,
                screen_desc: s.observation.text_desc.clone(),
                gt_kind,
                gt_params,
                gt_bbox: s.gt_bbox.map(|b| BBoxLine { x1: b.x1 as i64, y1: b.y1 as i64, x2: b.x2 as i64, y2: b.y2 as i64 }),
                extra: ep.extra.get(i).cloned().unwrap_or_default(),
            }
        })
        .collect()
}

/// Write episodes in the canonical line format. Screenshot paths are written
/// relative to the file's directory when possible.
pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<(), TaskError> {
    let err = |source| TaskError::Unwritable { path: path.to_path_buf(), source };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = BufWriter::new(File::create(path).map_err(err)?);
    for ep in episodes {
        for line in episode_to_lines(ep, &base) {
            let text = serde_json::to_string(&line).expect("step line serializes");
            writeln!(out, "{text}").map_err(err)?;
        }
    }
    out.flush().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn line(ep: &str, idx: usize, kind: &str, params: Value) -> Value {
        json!({
            "episode_id": ep, "step_index": idx, "app": "Maps", "device": "phone", "benchmark": "syn",
            "split": "test", "instruction_high": "find a cafe", "screenshot_path": "shot.png",
            "img_w": 1080, "img_h": 2400, "gt_kind": kind, "gt_params": params
        })
    }

    fn write_lines(dir: &Path, lines: &[Value]) -> PathBuf {
        std::fs::write(dir.join("shot.png"), b"png").unwrap();
        let path = dir.join("eps.jsonl");
        let body: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        std::fs::write(&path, body.join("\n")).unwrap();
        path
    }

    #[test]
    fn click_without_bbox_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[line("e1", 0, "CLICK", json!({"point": [10, 20]})), line("e1", 1, "STOP", json!({}))],
        );
        let r = load_episodes(&path, &LoadOptions::default()).unwrap();
        assert_eq!(r.episodes.len(), 1);
        assert!(r.rejections.is_empty());
        assert_eq!(r.episodes[0].steps[0].gt_bbox, None);
        assert!(!r.episodes[0].is_truncated());
    }

    #[test]
    fn step_gap_rejects_episode() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[line("e1", 0, "WAIT", json!({})), line("e1", 2, "STOP", json!({})), line("e2", 0, "STOP", json!({}))],
        );
        let r = load_episodes(&path, &LoadOptions::default()).unwrap();
        assert_eq!(r.episodes.len(), 1);
        assert_eq!(r.rejections.len(), 1);
        assert_eq!(r.rejections[0].reason, "non-contiguous steps");
        assert_eq!(r.rejections[0].episode_id.as_deref(), Some("e1"));
    }

    #[test]
    fn schema_violations_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad_bbox = line("e3", 0, "TYPE", json!({"text": "x"}));
        bad_bbox["gt_bbox"] = json!({"x1": 1, "y1": 1, "x2": 5, "y2": 5});
        let mut missing = line("e4", 0, "STOP", json!({}));
        missing.as_object_mut().unwrap().remove("img_w");
        let path = write_lines(
            dir.path(),
            &[line("e1", 0, "FLY", json!({})), line("e2", 0, "CLICK", json!({"point": [1, 2000]})), bad_bbox, missing],
        );
        let r = load_episodes(&path, &LoadOptions::default()).unwrap();
        assert!(r.episodes.is_empty());
        let lines: Vec<_> = r.rejections.iter().map(|x| x.line).collect();
        assert_eq!(lines, vec![Some(4), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn missing_screenshot_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = line("e1", 0, "STOP", json!({}));
        l["screenshot_path"] = json!("nope.png");
        let path = write_lines(dir.path(), &[l]);
        let r = load_episodes(&path, &LoadOptions::default()).unwrap();
        assert!(r.episodes.is_empty());
        assert!(r.rejections[0].reason.contains("unresolvable screenshot"));
        let lax = load_episodes(&path, &LoadOptions { require_screenshots: false }).unwrap();
        assert_eq!(lax.episodes.len(), 1);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let err = load_episodes(Path::new("/definitely/not/here.jsonl"), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, TaskError::Unreadable { .. }));
    }

    #[test]
    fn extra_metadata_survives_a_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = line("e1", 0, "STOP", json!({}));
        l["annotator"] = json!("a7");
        let path = write_lines(dir.path(), &[l]);
        let first = load_episodes(&path, &LoadOptions::default()).unwrap().episodes;
        let out = dir.path().join("again.jsonl");
        write_episodes(&out, &first).unwrap();
        let second = load_episodes(&out, &LoadOptions::default()).unwrap().episodes;
        assert_eq!(first, second);
        assert_eq!(second[0].extra[0]["annotator"], json!("a7"));
    }
}

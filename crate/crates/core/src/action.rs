//! Unified action space and normalized screen geometry.
//!
//! All spatial parameters live in a per-mille screen space: integer
//! coordinates in `[0, 1000]` on both axes, independent of the device
//! resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of the normalized coordinate space.
pub const SCREEN_MAX: u16 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimensions { width: f64, height: f64 },
    #[error("coordinate ({x}, {y}) outside [0, 1000]")]
    OutOfRange { x: i64, y: i64 },
    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),
    #[error("ambiguous gesture: start and end coincide")]
    AmbiguousGesture,
    #[error("cannot decode action `{input}`: {reason}")]
    Decode { input: String, reason: String },
}

/// A point in per-mille screen space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: u16,
    pub y: u16,
}

impl Point {
    pub fn new(x: i64, y: i64) -> Result<Self, ActionError> {
        let max = SCREEN_MAX as i64;
        if !(0..=max).contains(&x) || !(0..=max).contains(&y) {
            return Err(ActionError::OutOfRange { x, y });
        }
        Ok(Point { x: x as u16, y: y as u16 })
    }

    pub fn as_f64(self) -> (f64, f64) {
        (self.x as f64, self.y as f64)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Pixel dimensions of a screenshot. Fractional sizes occur when a model
/// works on a resized copy of the original image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub width: f64,
    pub height: f64,
}

impl Dims {
    pub fn new(width: f64, height: f64) -> Result<Self, ActionError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(width) || !ok(height) {
            return Err(ActionError::InvalidDimensions { width, height });
        }
        Ok(Dims { width, height })
    }
}

/// Result of mapping a pixel coordinate into per-mille space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub point: Point,
    /// Set when the raw coordinate fell outside the image and was clamped.
    pub clamped: bool,
}

fn scale_axis(raw: f64, dim: f64) -> (u16, bool) {
    let scaled = (raw / dim * SCREEN_MAX as f64).round();
    if scaled.is_nan() {
        return (0, true);
    }
    let clamped = scaled.clamp(0.0, SCREEN_MAX as f64);
    (clamped as u16, clamped != scaled || raw < 0.0 || raw > dim)
}

/// Map a pixel-space coordinate to per-mille space: `round(raw / dim * 1000)`,
/// clamped to `[0, 1000]`.
pub fn normalize_point(raw: (f64, f64), dims: Dims) -> Result<Normalized, ActionError> {
    let dims = Dims::new(dims.width, dims.height)?;
    let (x, cx) = scale_axis(raw.0, dims.width);
    let (y, cy) = scale_axis(raw.1, dims.height);
    if cx || cy {
        log::warn!("coordinate {:?} outside {}x{}, clamped", raw, dims.width, dims.height);
    }
    Ok(Normalized { point: Point { x, y }, clamped: cx || cy })
}

/// Inverse of [`normalize_point`] without rounding.
pub fn denormalize_point(p: Point, dims: Dims) -> (f64, f64) {
    (
        p.x as f64 / SCREEN_MAX as f64 * dims.width,
        p.y as f64 / SCREEN_MAX as f64 * dims.height,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    /// Unit finger displacement for this direction in screen space (y grows downward).
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

impl FromStr for Direction {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            _ => Err(ActionError::Decode { input: s.to_string(), reason: "unknown direction".into() }),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Button {
    Home,
    Back,
    Enter,
}

impl Button {
    pub const ALL: [Button; 3] = [Button::Home, Button::Back, Button::Enter];

    pub fn as_str(self) -> &'static str {
        match self {
            Button::Home => "HOME",
            Button::Back => "BACK",
            Button::Enter => "ENTER",
        }
    }
}

impl FromStr for Button {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HOME" => Ok(Button::Home),
            "BACK" => Ok(Button::Back),
            "ENTER" => Ok(Button::Enter),
            _ => Err(ActionError::Decode { input: s.to_string(), reason: "unknown button".into() }),
        }
    }
}

impl fmt::Display for Button {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Finger-motion direction of a swipe from `start` to `end`, taken along the
/// dominant displacement axis. Ties go to the vertical axis.
pub fn derive_scroll_direction(start: Point, end: Point) -> Result<Direction, ActionError> {
    let dx = end.x as f64 - start.x as f64;
    let dy = end.y as f64 - start.y as f64;
    direction_from_offset(dx, dy)
}

/// Same rule as [`derive_scroll_direction`] on an unclamped displacement.
pub fn direction_from_offset(dx: f64, dy: f64) -> Result<Direction, ActionError> {
    if dx == 0.0 && dy == 0.0 {
        return Err(ActionError::AmbiguousGesture);
    }
    if dy.abs() >= dx.abs() {
        Ok(if dy < 0.0 { Direction::Up } else { Direction::Down })
    } else {
        Ok(if dx < 0.0 { Direction::Left } else { Direction::Right })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Metric {
    L1,
    #[default]
    L2,
}

pub fn spatial_distance(a: Point, b: Point, metric: Metric) -> f64 {
    let dx = (a.x as f64 - b.x as f64).abs();
    let dy = (a.y as f64 - b.y as f64).abs();
    match metric {
        Metric::L1 => dx + dy,
        Metric::L2 => dx.hypot(dy),
    }
}

/// Axis-aligned box in per-mille space, edges inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl BBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, ActionError> {
        let a = Point::new(x1, y1).map_err(|e| ActionError::InvalidBBox(e.to_string()))?;
        let b = Point::new(x2, y2).map_err(|e| ActionError::InvalidBBox(e.to_string()))?;
        if a.x > b.x || a.y > b.y {
            return Err(ActionError::InvalidBBox(format!("corners out of order: ({x1},{y1}) ({x2},{y2})")));
        }
        Ok(BBox { x1: a.x, y1: a.y, x2: b.x, y2: b.y })
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1) as f64
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1) as f64
    }

    /// Zero-area boxes are legal but flagged.
    pub fn is_degenerate(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 as f64 + self.x2 as f64) / 2.0, (self.y1 as f64 + self.y2 as f64) / 2.0)
    }

    /// Point containment. A degenerate box only contains its (rounded) center.
    pub fn contains(&self, p: Point) -> bool {
        if self.is_degenerate() {
            let (cx, cy) = self.center();
            return p.x as f64 == cx.round() && p.y as f64 == cy.round();
        }
        (self.x1..=self.x2).contains(&p.x) && (self.y1..=self.y2).contains(&p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Click,
    LongPress,
    Scroll,
    Type,
    Open,
    Press,
    Wait,
    Stop,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::Click,
        ActionKind::LongPress,
        ActionKind::Scroll,
        ActionKind::Type,
        ActionKind::Open,
        ActionKind::Press,
        ActionKind::Wait,
        ActionKind::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Click => "CLICK",
            ActionKind::LongPress => "LONG_PRESS",
            ActionKind::Scroll => "SCROLL",
            ActionKind::Type => "TYPE",
            ActionKind::Open => "OPEN",
            ActionKind::Press => "PRESS",
            ActionKind::Wait => "WAIT",
            ActionKind::Stop => "STOP",
        }
    }

    /// Kinds whose ground truth may carry a target bounding box.
    pub fn is_spatial(self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::LongPress)
    }

    pub fn is_textual(self) -> bool {
        matches!(self, ActionKind::Type | ActionKind::Open)
    }
}

impl FromStr for ActionKind {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        ActionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == up)
            .ok_or_else(|| ActionError::Decode { input: s.to_string(), reason: "unknown action kind".into() })
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A set of action kinds, e.g. the action space of a dialect or a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct KindSet(u8);

impl KindSet {
    pub fn all() -> Self {
        Self::from_kinds(ActionKind::ALL)
    }

    pub fn from_kinds(kinds: impl IntoIterator<Item = ActionKind>) -> Self {
        KindSet(kinds.into_iter().fold(0, |acc, k| acc | (1 << k as u8)))
    }

    pub fn contains(&self, kind: ActionKind) -> bool {
        self.0 & (1 << kind as u8) != 0
    }

    pub fn insert(&mut self, kind: ActionKind) {
        self.0 |= 1 << kind as u8;
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ActionKind> + '_ {
        ActionKind::ALL.into_iter().filter(|k| self.contains(*k))
    }
}

/// An action in the unified action space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Click {
        point: Point,
    },
    LongPress {
        point: Point,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ms: Option<u32>,
    },
    Scroll {
        point: Point,
        direction: Direction,
    },
    Type {
        text: String,
        /// The text was followed by a submit marker (trailing newline).
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        submit: bool,
    },
    Open {
        app: String,
    },
    Press {
        button: Button,
    },
    Wait {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ms: Option<u32>,
    },
    Stop {
        status: String,
    },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::LongPress { .. } => ActionKind::LongPress,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::Type { .. } => ActionKind::Type,
            Action::Open { .. } => ActionKind::Open,
            Action::Press { .. } => ActionKind::Press,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Stop { .. } => ActionKind::Stop,
        }
    }

    pub fn point(&self) -> Option<Point> {
        match self {
            Action::Click { point } | Action::LongPress { point, .. } | Action::Scroll { point, .. } => Some(*point),
            _ => None,
        }
    }

    /// Text payload of TYPE and OPEN.
    pub fn text(&self) -> Option<&str> {
        match self {
            Action::Type { text, .. } => Some(text),
            Action::Open { app } => Some(app),
            _ => None,
        }
    }

    /// Canonical encoding, e.g. `CLICK(point=(616,211))`.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click { point } => write!(f, "CLICK(point={point})"),
            Action::LongPress { point, duration_ms: None } => write!(f, "LONG_PRESS(point={point})"),
            Action::LongPress { point, duration_ms: Some(d) } => {
                write!(f, "LONG_PRESS(point={point},duration={d})")
            }
            Action::Scroll { point, direction } => write!(f, "SCROLL(point={point},to={direction})"),
            Action::Type { text, submit: false } => write!(f, "TYPE(input={})", quote(text)),
            Action::Type { text, submit: true } => write!(f, "TYPE(input={},submit=true)", quote(text)),
            Action::Open { app } => write!(f, "OPEN(app={})", quote(app)),
            Action::Press { button } => write!(f, "PRESS(press={button})"),
            Action::Wait { duration_ms: None } => write!(f, "WAIT()"),
            Action::Wait { duration_ms: Some(d) } => write!(f, "WAIT(duration={d})"),
            Action::Stop { status } => write!(f, "STOP(status={})", quote(status)),
        }
    }
}

/// Split `a=1,b="x,y",c=(1,2)` at top-level commas.
fn split_params(body: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut in_str = false;
    let mut escaped = false;
    let mut start = 0usize;
    let bytes: Vec<(usize, char)> = body.char_indices().collect();
    let mut pieces = Vec::new();
    for &(i, c) in &bytes {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                pieces.push(&body[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if in_str || depth != 0 {
        return Err("unbalanced parameters".into());
    }
    if !body[start..].trim().is_empty() || !pieces.is_empty() {
        pieces.push(&body[start..]);
    }
    for p in pieces {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("parameter without `=`: {p}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_point_literal(v: &str) -> Result<Point, String> {
    let inner = v
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format!("bad point literal {v}"))?;
    let (x, y) = inner.split_once(',').ok_or_else(|| format!("bad point literal {v}"))?;
    let x: i64 = x.trim().parse().map_err(|_| format!("bad x in {v}"))?;
    let y: i64 = y.trim().parse().map_err(|_| format!("bad y in {v}"))?;
    Point::new(x, y).map_err(|e| e.to_string())
}

fn parse_string_literal(v: &str) -> Result<String, String> {
    serde_json::from_str::<String>(v).map_err(|e| format!("bad string literal {v}: {e}"))
}

impl FromStr for Action {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: String| ActionError::Decode { input: s.to_string(), reason };
        let s_trim = s.trim();
        let open = s_trim.find('(').ok_or_else(|| err("missing `(`".into()))?;
        let body = s_trim[open + 1..].strip_suffix(')').ok_or_else(|| err("missing `)`".into()))?;
        let kind: ActionKind = s_trim[..open].parse()?;
        let params = split_params(body).map_err(err)?;
        let get = |name: &str| params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
        let need = |name: &str| get(name).ok_or_else(|| err(format!("missing parameter `{name}`")));
        let parse_u32 = |v: &str| v.parse::<u32>().map_err(|_| err(format!("bad integer {v}")));
        let action = match kind {
            ActionKind::Click => Action::Click { point: parse_point_literal(need("point")?).map_err(err)? },
            ActionKind::LongPress => Action::LongPress {
                point: parse_point_literal(need("point")?).map_err(err)?,
                duration_ms: get("duration").map(parse_u32).transpose()?,
            },
            ActionKind::Scroll => Action::Scroll {
                point: parse_point_literal(need("point")?).map_err(err)?,
                direction: need("to")?.parse()?,
            },
            ActionKind::Type => Action::Type {
                text: parse_string_literal(need("input")?).map_err(err)?,
                submit: matches!(get("submit"), Some("true")),
            },
            ActionKind::Open => Action::Open { app: parse_string_literal(need("app")?).map_err(err)? },
            ActionKind::Press => Action::Press { button: need("press")?.parse()? },
            ActionKind::Wait => Action::Wait { duration_ms: get("duration").map(parse_u32).transpose()? },
            ActionKind::Stop => Action::Stop { status: parse_string_literal(need("status")?).map_err(err)? },
        };
        Ok(action)
    }
}

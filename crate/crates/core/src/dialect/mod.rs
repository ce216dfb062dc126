//! Prompt dialects: decoding model responses into actions, and rendering
//! actions, history entries and fixed-thought prefixes back into each
//! dialect's text form.
//!
//! Grammar sketches (informal BNF):
//!
//! ```text
//! xml-toolcall   := ["<thinking>" TEXT "</thinking>"] "<tool_call>" JSON "</tool_call>"
//!                   ["<conclusion>" TEXT "</conclusion>"]
//! JSON           := {"name": NAME, "arguments": {"action": ACT, ...params}}
//! ACT            := click | long_press | swipe | type | open | system_button | wait | terminate
//!
//! thought-action := ["Thought:" TEXT] "Action:" CALL
//! CALL           := IDENT "(" [KWARG ("," KWARG)*] ")"
//! KWARG          := IDENT "=" QUOTED
//! IDENT          := click | long_press | type | scroll | open_app | drag | press_home
//!                 | press_back | wait | finished
//!
//! plain-json     := ["```json"] {"action": KIND, ...params} ["```"]
//! ```

mod plain_json;
mod thought_action;
mod xml_toolcall;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{denormalize_point, direction_from_offset, normalize_point, Action, ActionKind, Button, Dims, KindSet, Point, SCREEN_MAX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialectError {
    #[error("dialect {dialect} cannot represent {action}")]
    Unrepresentable { dialect: DialectId, action: String },
    #[error("dialect {dialect} does not support {feature}")]
    UnsupportedFeature { dialect: DialectId, feature: &'static str },
    #[error("unknown dialect `{0}`")]
    UnknownDialect(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DialectId {
    XmlToolcall,
    ThoughtAction,
    PlainJson,
}

impl DialectId {
    pub fn as_str(self) -> &'static str {
        match self {
            DialectId::XmlToolcall => "xml-toolcall",
            DialectId::ThoughtAction => "thought-action",
            DialectId::PlainJson => "plain-json",
        }
    }
}

impl fmt::Display for DialectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DialectId {
    type Err = DialectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xml-toolcall" => Ok(DialectId::XmlToolcall),
            "thought-action" => Ok(DialectId::ThoughtAction),
            "plain-json" => Ok(DialectId::PlainJson),
            other => Err(DialectError::UnknownDialect(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinateSpace {
    NativePixel,
    PerMille,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialect {
    pub id: DialectId,
    pub action_support: KindSet,
    pub coordinate_space: CoordinateSpace,
}

impl Dialect {
    pub fn xml_toolcall() -> Self {
        Dialect { id: DialectId::XmlToolcall, action_support: KindSet::all(), coordinate_space: CoordinateSpace::NativePixel }
    }

    pub fn thought_action() -> Self {
        use ActionKind::*;
        Dialect {
            id: DialectId::ThoughtAction,
            action_support: KindSet::from_kinds([Click, LongPress, Scroll, Type, Open, Press, Wait, Stop]),
            coordinate_space: CoordinateSpace::PerMille,
        }
    }

    pub fn plain_json() -> Self {
        Dialect { id: DialectId::PlainJson, action_support: KindSet::all(), coordinate_space: CoordinateSpace::PerMille }
    }

    pub fn from_id(id: DialectId) -> Self {
        match id {
            DialectId::XmlToolcall => Self::xml_toolcall(),
            DialectId::ThoughtAction => Self::thought_action(),
            DialectId::PlainJson => Self::plain_json(),
        }
    }

    pub fn with_coordinate_space(mut self, space: CoordinateSpace) -> Self {
        self.coordinate_space = space;
        self
    }

    pub fn with_action_support(mut self, support: KindSet) -> Self {
        assert!(!support.is_empty(), "a dialect needs at least one action kind");
        self.action_support = support;
        self
    }

    pub fn supports_thought(&self) -> bool {
        !matches!(self.id, DialectId::PlainJson)
    }

    /// Whether the dialect can express this exact action.
    pub fn can_represent(&self, action: &Action) -> bool {
        if !self.action_support.contains(action.kind()) {
            return false;
        }
        match self.id {
            DialectId::ThoughtAction => !matches!(action, Action::Press { button: Button::Enter }),
            _ => true,
        }
    }

    /// Decode a raw model response. Never fails: failures are data.
    pub fn parse_response(&self, text: &str, dims: Dims) -> ParsedResponse {
        let mut parsed = match self.id {
            DialectId::XmlToolcall => xml_toolcall::parse(self, text, dims),
            DialectId::ThoughtAction => thought_action::parse(self, text, dims),
            DialectId::PlainJson => plain_json::parse(self, text, dims),
        };
        if let Decoded::Action(a) = &parsed.action {
            if !self.action_support.contains(a.kind()) {
                parsed.action = Decoded::Failure(ParseFailure {
                    kind: FailureKind::Unsupported,
                    action_name: None,
                    detail: format!("{} outside the {} action space", a.kind(), self.id),
                });
            }
        }
        parsed
    }

    /// Render the action-bearing part of a response (no thought/conclusion).
    pub fn render_action(&self, action: &Action, dims: Dims) -> Result<String, DialectError> {
        if !self.can_represent(action) {
            return Err(DialectError::Unrepresentable { dialect: self.id, action: action.canonical() });
        }
        Ok(match self.id {
            DialectId::XmlToolcall => xml_toolcall::render_call(self, action, dims),
            DialectId::ThoughtAction => thought_action::render_call(action),
            DialectId::PlainJson => plain_json::render_object(action).to_string(),
        })
    }

    /// Render a complete response the way a model speaking this dialect would.
    pub fn render_response(
        &self,
        action: &Action,
        thought: Option<&str>,
        conclusion: Option<&str>,
        dims: Dims,
    ) -> Result<String, DialectError> {
        let body = self.render_action(action, dims)?;
        Ok(match self.id {
            DialectId::XmlToolcall => {
                let mut out = String::new();
                if let Some(t) = thought {
                    out.push_str(&format!("<thinking>\n{t}\n</thinking>\n"));
                }
                out.push_str(&format!("<tool_call>\n{body}\n</tool_call>"));
                if let Some(c) = conclusion {
                    out.push_str(&format!("\n<conclusion>\n{c}\n</conclusion>"));
                }
                out
            }
            DialectId::ThoughtAction => match thought {
                Some(t) => format!("Thought: {t}\nAction: {body}"),
                None => format!("Action: {body}"),
            },
            DialectId::PlainJson => body,
        })
    }

    /// Render one history entry; `position` is 1-based.
    pub fn render_history_entry(&self, entry: &HistoryEntry, position: usize) -> Result<String, DialectError> {
        if !self.can_represent(&entry.action) {
            return Err(DialectError::Unrepresentable { dialect: self.id, action: entry.action.canonical() });
        }
        let (thought, conclusion) = match &entry.source {
            EntrySource::Reference => (None, None),
            EntrySource::Artifact { thought, conclusion } => (thought.as_deref(), conclusion.as_deref()),
        };
        Ok(match self.id {
            DialectId::XmlToolcall => match conclusion {
                Some(c) => format!("Step {position}: {} -> {};", c.trim(), entry.action),
                None => format!("Step {position}: {};", entry.action),
            },
            DialectId::ThoughtAction => {
                let call = thought_action::render_call(&entry.action);
                match thought {
                    Some(t) => format!("Thought: {}\nAction: {call}", t.trim()),
                    None => format!("Action: {call}"),
                }
            }
            DialectId::PlainJson => {
                let mut obj = plain_json::render_object(&entry.action);
                obj.as_object_mut().expect("object").insert("step".into(), position.into());
                obj.to_string()
            }
        })
    }

    /// Render a whole history; an empty history renders as the empty string.
    pub fn render_history(&self, entries: &[HistoryEntry]) -> Result<String, DialectError> {
        let parts = entries
            .iter()
            .enumerate()
            .map(|(i, e)| self.render_history_entry(e, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        let sep = match self.id {
            DialectId::XmlToolcall => " ",
            DialectId::ThoughtAction => "\n\n",
            DialectId::PlainJson => "\n",
        };
        Ok(parts.join(sep))
    }

    /// Generation prefix that pins a reasoning trace, so the model only
    /// produces the action.
    pub fn render_fixed_thought(&self, thought: &str) -> Result<FixedThought, DialectError> {
        let text = match self.id {
            DialectId::XmlToolcall => format!("<thinking>\n{thought}\n</thinking>\n"),
            DialectId::ThoughtAction => format!("Thought: {thought}\nAction:"),
            DialectId::PlainJson => {
                return Err(DialectError::UnsupportedFeature { dialect: self.id, feature: "fixed thought" })
            }
        };
        Ok(FixedThought { text, empty: thought.trim().is_empty() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedThought {
    pub text: String,
    /// The pinned thought was empty.
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    NoAction,
    BadParams,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub kind: FailureKind,
    /// Recognized action kind when the failure happened past name resolution.
    pub action_name: Option<ActionKind>,
    pub detail: String,
}

impl ParseFailure {
    pub fn recognized(&self) -> bool {
        self.action_name.is_some()
    }

    pub(crate) fn no_action(detail: impl Into<String>) -> Self {
        ParseFailure { kind: FailureKind::NoAction, action_name: None, detail: detail.into() }
    }

    pub(crate) fn bad_params(kind: ActionKind, detail: impl Into<String>) -> Self {
        ParseFailure { kind: FailureKind::BadParams, action_name: Some(kind), detail: detail.into() }
    }

    pub(crate) fn unsupported(name: &str) -> Self {
        ParseFailure { kind: FailureKind::Unsupported, action_name: None, detail: format!("unknown action `{name}`") }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            FailureKind::NoAction => "no-action",
            FailureKind::BadParams => "bad-params",
            FailureKind::Unsupported => "unsupported",
        };
        write!(f, "{k}: {}", self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoded {
    Action(Action),
    Failure(ParseFailure),
}

impl Decoded {
    pub fn action(&self) -> Option<&Action> {
        match self {
            Decoded::Action(a) => Some(a),
            Decoded::Failure(_) => None,
        }
    }

    pub fn failure(&self) -> Option<&ParseFailure> {
        match self {
            Decoded::Action(_) => None,
            Decoded::Failure(f) => Some(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub thought: Option<String>,
    pub conclusion: Option<String>,
    pub action: Decoded,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ParsedResponse {
    pub(crate) fn new(raw: &str) -> Self {
        ParsedResponse {
            thought: None,
            conclusion: None,
            action: Decoded::Failure(ParseFailure::no_action("empty response")),
            raw: raw.to_string(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum EntrySource {
    Reference,
    Artifact { thought: Option<String>, conclusion: Option<String> },
}

/// One position of the interaction history shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step_index: usize,
    pub action: Action,
    pub source: EntrySource,
    pub screenshot: PathBuf,
}

impl HistoryEntry {
    pub fn is_artifact(&self) -> bool {
        matches!(self.source, EntrySource::Artifact { .. })
    }
}

// Shared helpers for the dialect decoders.

/// Convert a coordinate decoded from a response into per-mille space.
pub(crate) fn to_point(dialect: &Dialect, raw: (f64, f64), dims: Dims) -> Result<Point, String> {
    match dialect.coordinate_space {
        CoordinateSpace::NativePixel => normalize_point(raw, dims).map(|n| n.point).map_err(|e| e.to_string()),
        CoordinateSpace::PerMille => {
            let (x, y) = (raw.0.round(), raw.1.round());
            if !(x.is_finite() && y.is_finite()) {
                return Err("non-finite coordinate".into());
            }
            Point::new(x as i64, y as i64).map_err(|e| e.to_string())
        }
    }
}

/// Swipe displacement expressed in per-mille units, before clamping.
pub(crate) fn swipe_offset(dialect: &Dialect, start: (f64, f64), end: (f64, f64), dims: Dims) -> (f64, f64) {
    let (dx, dy) = (end.0 - start.0, end.1 - start.1);
    match dialect.coordinate_space {
        CoordinateSpace::NativePixel => (dx / dims.width * SCREEN_MAX as f64, dy / dims.height * SCREEN_MAX as f64),
        CoordinateSpace::PerMille => (dx, dy),
    }
}

pub(crate) fn decode_swipe(
    dialect: &Dialect,
    start: (f64, f64),
    end: (f64, f64),
    dims: Dims,
) -> Result<Action, String> {
    let point = to_point(dialect, start, dims)?;
    let (dx, dy) = swipe_offset(dialect, start, end, dims);
    let direction = direction_from_offset(dx, dy).map_err(|e| e.to_string())?;
    Ok(Action::Scroll { point, direction })
}

/// Coordinates for rendering a point in the dialect's space.
pub(crate) fn render_coords(dialect: &Dialect, p: Point, dims: Dims) -> (f64, f64) {
    match dialect.coordinate_space {
        CoordinateSpace::NativePixel => denormalize_point(p, dims),
        CoordinateSpace::PerMille => p.as_f64(),
    }
}

/// End point of a rendered swipe: 200 per-mille along the direction,
/// possibly off-screen.
pub(crate) fn swipe_end(p: Point, dir: crate::action::Direction) -> (f64, f64) {
    let (ux, uy) = dir.unit();
    (p.x as f64 + 200.0 * ux as f64, p.y as f64 + 200.0 * uy as f64)
}

/// Split a trailing newline submit marker off typed text.
pub(crate) fn split_submit(text: &str) -> (String, bool) {
    match text.strip_suffix('\n') {
        Some(rest) => (rest.to_string(), true),
        None => (text.to_string(), false),
    }
}

/// Text between the first `open` tag and its matching `close`, if any.
pub(crate) fn tag_block<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let rest = &text[start..];
    let end = rest.find(close).unwrap_or(rest.len());
    Some(&rest[..end])
}

#[cfg(test)]
mod tests;

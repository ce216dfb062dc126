use serde_json::{json, Map, Value};

use super::{decode_swipe, render_coords, split_submit, to_point, Decoded, Dialect, ParseFailure, ParsedResponse};
use crate::action::{Action, ActionKind, Button, Dims, Direction};

pub(super) fn parse(dialect: &Dialect, text: &str, dims: Dims) -> ParsedResponse {
    let mut out = ParsedResponse::new(text);
    let body = strip_fence(text);
    let value = match serde_json::from_str::<Value>(body) {
        Ok(v) => v,
        Err(e) => {
            out.action = Decoded::Failure(ParseFailure::no_action(format!("not a JSON object: {e}")));
            return out;
        }
    };
    let Value::Object(obj) = value else {
        out.action = Decoded::Failure(ParseFailure::no_action("not a JSON object"));
        return out;
    };
    out.action = decode(dialect, &obj, dims);
    out
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

fn decode(dialect: &Dialect, obj: &Map<String, Value>, dims: Dims) -> Decoded {
    let Some(name) = obj.get("action").and_then(Value::as_str) else {
        return Decoded::Failure(ParseFailure::no_action("object without `action`"));
    };
    let Ok(kind) = name.parse::<ActionKind>() else {
        return Decoded::Failure(ParseFailure::unsupported(name));
    };
    let coord = |key: &str| -> Result<(f64, f64), String> {
        match obj.get(key) {
            Some(Value::Array(xs)) if xs.len() == 2 => {
                let x = xs[0].as_f64().ok_or_else(|| format!("`{key}` x is not a number"))?;
                let y = xs[1].as_f64().ok_or_else(|| format!("`{key}` y is not a number"))?;
                Ok((x, y))
            }
            Some(other) => Err(format!("`{key}` must be [x, y], got {other}")),
            None => Err(format!("missing `{key}`")),
        }
    };
    let string = |key: &str| obj.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing `{key}`"));
    let duration = || -> Result<Option<u32>, String> {
        match obj.get("duration") {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_u64().filter(|d| *d <= u32::MAX as u64).map(|d| Some(d as u32)).ok_or_else(|| "bad `duration`".into()),
        }
    };
    let result: Result<Action, String> = (|| {
        Ok(match kind {
            ActionKind::Click => Action::Click { point: to_point(dialect, coord("point")?, dims)? },
            ActionKind::LongPress => {
                Action::LongPress { point: to_point(dialect, coord("point")?, dims)?, duration_ms: duration()? }
            }
            ActionKind::Scroll => match obj.get("to") {
                Some(Value::String(d)) => Action::Scroll {
                    point: to_point(dialect, coord("point")?, dims)?,
                    direction: d.parse::<Direction>().map_err(|e| e.to_string())?,
                },
                _ => decode_swipe(dialect, coord("point")?, coord("to")?, dims)?,
            },
            ActionKind::Type => {
                let submit = obj.get("submit").and_then(Value::as_bool);
                let raw = string("input")?;
                match submit {
                    Some(s) => Action::Type { text: raw.to_string(), submit: s },
                    None => {
                        let (text, submit) = split_submit(raw);
                        Action::Type { text, submit }
                    }
                }
            }
            ActionKind::Open => Action::Open { app: string("app")?.to_string() },
            ActionKind::Press => Action::Press { button: string("press")?.parse::<Button>().map_err(|e| e.to_string())? },
            ActionKind::Wait => Action::Wait { duration_ms: duration()? },
            ActionKind::Stop => Action::Stop { status: string("status").unwrap_or("finish").to_string() },
        })
    })();
    match result {
        Ok(a) => Decoded::Action(a),
        Err(detail) => Decoded::Failure(ParseFailure::bad_params(kind, detail)),
    }
}

/// Per-mille object form, also used for history entries.
pub(super) fn render_object(action: &Action) -> Value {
    let pm = Dialect::plain_json();
    let dims = Dims { width: 1000.0, height: 1000.0 };
    let pt = |p| {
        let (x, y) = render_coords(&pm, p, dims);
        json!([x as i64, y as i64])
    };
    match action {
        Action::Click { point } => json!({"action": "CLICK", "point": pt(*point)}),
        Action::LongPress { point, duration_ms } => {
            let mut m = json!({"action": "LONG_PRESS", "point": pt(*point)});
            if let Some(d) = duration_ms {
                m["duration"] = json!(d);
            }
            m
        }
        Action::Scroll { point, direction } => json!({"action": "SCROLL", "point": pt(*point), "to": direction.as_str()}),
        Action::Type { text, submit } => {
            let mut m = json!({"action": "TYPE", "input": text});
            if *submit || text.ends_with('\n') {
                m["submit"] = json!(submit);
            }
            m
        }
        Action::Open { app } => json!({"action": "OPEN", "app": app}),
        Action::Press { button } => json!({"action": "PRESS", "press": button.as_str()}),
        Action::Wait { duration_ms } => match duration_ms {
            Some(d) => json!({"action": "WAIT", "duration": d}),
            None => json!({"action": "WAIT"}),
        },
        Action::Stop { status } => json!({"action": "STOP", "status": status}),
    }
}

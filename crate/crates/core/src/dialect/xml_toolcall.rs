use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Map, Value};

use super::{decode_swipe, render_coords, split_submit, swipe_end, tag_block, to_point, Decoded, Dialect, ParseFailure, ParsedResponse};
use crate::action::{Action, ActionKind, Button, Dims};

const TOOL_NAME: &str = "mobile_use";

pub(super) fn parse(dialect: &Dialect, text: &str, dims: Dims) -> ParsedResponse {
    let mut out = ParsedResponse::new(text);
    out.thought = tag_block(text, "<thinking>", "</thinking>")
        .or_else(|| tag_block(text, "<think>", "</think>"))
        .map(|t| t.trim().to_string());
    out.conclusion = tag_block(text, "<conclusion>", "</conclusion>").map(|t| t.trim().to_string());

    let blocks = tool_call_blocks(text);
    let payload = match blocks.first() {
        Some(first) => {
            if blocks.len() > 1 {
                out.warnings.push(format!("{} tool_call blocks, using the first", blocks.len()));
            }
            Some(first.to_string())
        }
        None => {
            let fallback = first_json_object(text);
            if fallback.is_some() {
                out.warnings.push("tool call without <tool_call> tags accepted".into());
            }
            fallback
        }
    };
    out.action = match payload {
        None => Decoded::Failure(ParseFailure::no_action("no tool_call block")),
        Some(p) => decode_call(dialect, &p, dims),
    };
    out
}

fn tool_call_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("<tool_call>") {
        let after = &rest[i + "<tool_call>".len()..];
        match after.find("</tool_call>") {
            Some(j) => {
                blocks.push(&after[..j]);
                rest = &after[j + "</tool_call>".len()..];
            }
            None => {
                blocks.push(after);
                break;
            }
        }
    }
    blocks
}

/// First parseable JSON object embedded in `text`.
fn first_json_object(text: &str) -> Option<String> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v @ Value::Object(_))) = stream.next() {
            if v.get("arguments").is_some() || v.get("action").is_some() {
                return Some(v.to_string());
            }
        }
    }
    None
}

fn recover_name(payload: &str) -> Option<ActionKind> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#""action"\s*:\s*"([A-Za-z_]+)""#).expect("static regex"));
    re.captures(payload).and_then(|c| kind_for(&c[1]))
}

fn kind_for(name: &str) -> Option<ActionKind> {
    Some(match name {
        "click" => ActionKind::Click,
        "long_press" => ActionKind::LongPress,
        "swipe" => ActionKind::Scroll,
        "type" => ActionKind::Type,
        "open" | "open_app" => ActionKind::Open,
        "system_button" => ActionKind::Press,
        "wait" => ActionKind::Wait,
        "terminate" => ActionKind::Stop,
        _ => return None,
    })
}

fn coord(args: &Map<String, Value>, key: &str) -> Result<(f64, f64), String> {
    match args.get(key) {
        Some(Value::Array(xs)) if xs.len() == 2 => {
            let x = xs[0].as_f64().ok_or_else(|| format!("`{key}` x is not a number"))?;
            let y = xs[1].as_f64().ok_or_else(|| format!("`{key}` y is not a number"))?;
            Ok((x, y))
        }
        Some(other) => Err(format!("`{key}` must be [x, y], got {other}")),
        None => Err(format!("missing `{key}`")),
    }
}

fn seconds_to_ms(args: &Map<String, Value>, key: &str) -> Result<Option<u32>, String> {
    match args.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let s = v.as_f64().ok_or_else(|| format!("`{key}` is not a number"))?;
            if !(0.0..=4.0e6).contains(&s) {
                return Err(format!("`{key}` out of range"));
            }
            Ok(Some((s * 1000.0).round() as u32))
        }
    }
}

fn decode_call(dialect: &Dialect, payload: &str, dims: Dims) -> Decoded {
    let value: Value = match serde_json::from_str(payload.trim()) {
        Ok(v) => v,
        Err(e) => {
            return match recover_name(payload) {
                Some(kind) => Decoded::Failure(ParseFailure::bad_params(kind, format!("malformed tool call: {e}"))),
                None => Decoded::Failure(ParseFailure::no_action(format!("malformed tool call: {e}"))),
            }
        }
    };
    let args = match value.get("arguments") {
        Some(Value::Object(m)) => m.clone(),
        Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(m)) => m,
            _ => return Decoded::Failure(ParseFailure::no_action("arguments string is not an object")),
        },
        _ => match value {
            Value::Object(m) if m.contains_key("action") => m,
            _ => return Decoded::Failure(ParseFailure::no_action("tool call without arguments")),
        },
    };
    let name = match args.get("action").and_then(Value::as_str) {
        Some(n) => n.to_string(),
        None => return Decoded::Failure(ParseFailure::no_action("arguments without `action`")),
    };
    let Some(kind) = kind_for(&name) else {
        return Decoded::Failure(ParseFailure::unsupported(&name));
    };
    let str_arg = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| args.get(*k).and_then(Value::as_str))
            .map(str::to_string)
            .ok_or_else(|| format!("missing `{}`", keys[0]))
    };
    let result: Result<Action, String> = (|| {
        Ok(match kind {
            ActionKind::Click => Action::Click { point: to_point(dialect, coord(&args, "coordinate")?, dims)? },
            ActionKind::LongPress => Action::LongPress {
                point: to_point(dialect, coord(&args, "coordinate")?, dims)?,
                duration_ms: seconds_to_ms(&args, "time")?,
            },
            ActionKind::Scroll => decode_swipe(dialect, coord(&args, "coordinate")?, coord(&args, "coordinate2")?, dims)?,
            ActionKind::Type => {
                let (text, submit) = split_submit(&str_arg(&["text"])?);
                Action::Type { text, submit }
            }
            ActionKind::Open => Action::Open { app: str_arg(&["text", "app", "app_name"])? },
            ActionKind::Press => {
                Action::Press { button: str_arg(&["button"])?.parse::<Button>().map_err(|e| e.to_string())? }
            }
            ActionKind::Wait => Action::Wait { duration_ms: seconds_to_ms(&args, "time")? },
            ActionKind::Stop => Action::Stop { status: str_arg(&["status"]).unwrap_or_else(|_| "success".into()) },
        })
    })();
    match result {
        Ok(a) => Decoded::Action(a),
        Err(detail) => Decoded::Failure(ParseFailure::bad_params(kind, detail)),
    }
}

fn button_literal(b: Button) -> &'static str {
    match b {
        Button::Home => "Home",
        Button::Back => "Back",
        Button::Enter => "Enter",
    }
}

pub(super) fn render_call(dialect: &Dialect, action: &Action, dims: Dims) -> String {
    let pt = |p| {
        let (x, y) = render_coords(dialect, p, dims);
        json!([x, y])
    };
    let args = match action {
        Action::Click { point } => json!({"action": "click", "coordinate": pt(*point)}),
        Action::LongPress { point, duration_ms } => {
            let mut m = json!({"action": "long_press", "coordinate": pt(*point)});
            if let Some(d) = duration_ms {
                m["time"] = json!(*d as f64 / 1000.0);
            }
            m
        }
        Action::Scroll { point, direction } => {
            let end = swipe_end(*point, *direction);
            let end = match dialect.coordinate_space {
                super::CoordinateSpace::NativePixel => (end.0 / 1000.0 * dims.width, end.1 / 1000.0 * dims.height),
                super::CoordinateSpace::PerMille => end,
            };
            json!({"action": "swipe", "coordinate": pt(*point), "coordinate2": [end.0, end.1]})
        }
        Action::Type { text, submit } => {
            let t = if *submit { format!("{text}\n") } else { text.clone() };
            json!({"action": "type", "text": t})
        }
        Action::Open { app } => json!({"action": "open", "text": app}),
        Action::Press { button } => json!({"action": "system_button", "button": button_literal(*button)}),
        Action::Wait { duration_ms } => match duration_ms {
            Some(d) => json!({"action": "wait", "time": *d as f64 / 1000.0}),
            None => json!({"action": "wait"}),
        },
        Action::Stop { status } => json!({"action": "terminate", "status": status}),
    };
    json!({"name": TOOL_NAME, "arguments": args}).to_string()
}

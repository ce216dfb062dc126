use super::{decode_swipe, split_submit, to_point, Decoded, Dialect, ParseFailure, ParsedResponse};
use crate::action::{Action, ActionKind, Button, Dims, Direction, Point};

pub(super) fn parse(dialect: &Dialect, text: &str, dims: Dims) -> ParsedResponse {
    let mut out = ParsedResponse::new(text);
    let action_at = find_action_marker(text);
    if let Some(t) = text.find("Thought:") {
        let start = t + "Thought:".len();
        let end = action_at.filter(|a| *a >= start).unwrap_or(text.len());
        out.thought = Some(text[start..end].trim().to_string());
    }
    let Some(a) = action_at else {
        out.action = Decoded::Failure(ParseFailure::no_action("no `Action:` line"));
        return out;
    };
    let body = text[a + "Action:".len()..].trim_start();
    out.action = match parse_call(body) {
        Err(detail) => Decoded::Failure(ParseFailure::no_action(detail)),
        Ok(call) => {
            if !call.rest.trim().is_empty() {
                out.warnings.push("trailing text after the first action ignored".into());
            }
            decode(dialect, &call, dims)
        }
    };
    out
}

fn find_action_marker(text: &str) -> Option<usize> {
    // the marker must start a line
    let mut search = 0;
    while let Some(i) = text[search..].find("Action:") {
        let pos = search + i;
        if pos == 0 || text[..pos].ends_with('\n') || text[..pos].trim_end_matches([' ', '\t']).ends_with('\n') {
            return Some(pos);
        }
        search = pos + "Action:".len();
    }
    None
}

struct Call<'a> {
    name: String,
    kwargs: Vec<(String, String)>,
    rest: &'a str,
}

/// Parse `name(key='value', ...)` with Python-style quoted strings.
fn parse_call(body: &str) -> Result<Call<'_>, String> {
    let name_len = body.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(body.len());
    if name_len == 0 {
        return Err("action call without a name".into());
    }
    let name = body[..name_len].to_string();
    let mut chars = body[name_len..].char_indices().peekable();
    let base = name_len;
    match chars.next() {
        Some((_, '(')) => {}
        _ => return Err(format!("`{name}` is not followed by `(`")),
    }
    let mut kwargs = Vec::new();
    loop {
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace() || *c == ',') {
            chars.next();
        }
        match chars.peek() {
            Some((i, ')')) => {
                let end = base + i + 1;
                return Ok(Call { name, kwargs, rest: &body[end..] });
            }
            None => return Err("unterminated call".into()),
            _ => {}
        }
        let mut key = String::new();
        while let Some((_, c)) = chars.peek() {
            if c.is_ascii_alphanumeric() || *c == '_' {
                key.push(*c);
                chars.next();
            } else {
                break;
            }
        }
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        if key.is_empty() || !matches!(chars.next(), Some((_, '='))) {
            return Err("malformed keyword argument".into());
        }
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        let quote = match chars.next() {
            Some((_, q @ ('\'' | '"'))) => q,
            _ => return Err(format!("argument `{key}` is not a quoted string")),
        };
        let mut value = String::new();
        loop {
            match chars.next() {
                None => return Err(format!("unterminated string for `{key}`")),
                Some((_, '\\')) => match chars.next() {
                    Some((_, 'n')) => value.push('\n'),
                    Some((_, 't')) => value.push('\t'),
                    Some((_, c)) => value.push(c),
                    None => return Err(format!("unterminated string for `{key}`")),
                },
                Some((_, c)) if c == quote => break,
                Some((_, c)) => value.push(c),
            }
        }
        kwargs.push((key, value));
    }
}

/// Decode a box literal: `<|box_start|>(x,y)<|box_end|>`, `(x,y)`, or a
/// four-number box whose center is taken.
fn parse_box(raw: &str) -> Result<(f64, f64), String> {
    let inner = raw.replace("<|box_start|>", "").replace("<|box_end|>", "");
    let trimmed = inner.trim().trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    let nums = trimmed
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad box literal `{raw}`")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [x, y] => Ok((*x, *y)),
        [x1, y1, x2, y2] => Ok(((x1 + x2) / 2.0, (y1 + y2) / 2.0)),
        _ => Err(format!("bad box literal `{raw}`")),
    }
}

fn kind_for(name: &str) -> Option<ActionKind> {
    Some(match name {
        "click" => ActionKind::Click,
        "long_press" => ActionKind::LongPress,
        "type" => ActionKind::Type,
        "scroll" | "drag" => ActionKind::Scroll,
        "open_app" => ActionKind::Open,
        "press_home" | "press_back" => ActionKind::Press,
        "wait" => ActionKind::Wait,
        "finished" => ActionKind::Stop,
        _ => return None,
    })
}

fn decode(dialect: &Dialect, call: &Call<'_>, dims: Dims) -> Decoded {
    let Some(kind) = kind_for(&call.name) else {
        return Decoded::Failure(ParseFailure::unsupported(&call.name));
    };
    let arg = |k: &str| {
        call.kwargs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).ok_or_else(|| format!("missing `{k}`"))
    };
    let point = |k: &str| -> Result<Point, String> { to_point(dialect, parse_box(arg(k)?)?, dims) };
    let duration = || -> Result<Option<u32>, String> {
        match arg("duration") {
            Err(_) => Ok(None),
            Ok(d) => d.trim().parse::<u32>().map(Some).map_err(|_| format!("bad duration `{d}`")),
        }
    };
    let result: Result<Action, String> = (|| {
        Ok(match call.name.as_str() {
            "click" => Action::Click { point: point("start_box")? },
            "long_press" => Action::LongPress { point: point("start_box")?, duration_ms: duration()? },
            "type" => {
                let (text, submit) = split_submit(arg("content")?);
                Action::Type { text, submit }
            }
            "scroll" => Action::Scroll {
                point: point("start_box")?,
                direction: arg("direction")?.parse::<Direction>().map_err(|e| e.to_string())?,
            },
            "drag" => decode_swipe(dialect, parse_box(arg("start_box")?)?, parse_box(arg("end_box")?)?, dims)?,
            "open_app" => Action::Open { app: arg("app_name")?.to_string() },
            "press_home" => Action::Press { button: Button::Home },
            "press_back" => Action::Press { button: Button::Back },
            "wait" => Action::Wait { duration_ms: duration()? },
            "finished" => Action::Stop { status: arg("content").unwrap_or("finish").to_string() },
            _ => unreachable!("kind_for covers every name"),
        })
    })();
    match result {
        Ok(a) => Decoded::Action(a),
        Err(detail) => Decoded::Failure(ParseFailure::bad_params(kind, detail)),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

fn boxed(p: Point) -> String {
    format!("'<|box_start|>({},{})<|box_end|>'", p.x, p.y)
}

/// Render in per-mille coordinates. Callers check representability first.
pub(super) fn render_call(action: &Action) -> String {
    match action {
        Action::Click { point } => format!("click(start_box={})", boxed(*point)),
        Action::LongPress { point, duration_ms: None } => format!("long_press(start_box={})", boxed(*point)),
        Action::LongPress { point, duration_ms: Some(d) } => {
            format!("long_press(start_box={}, duration='{d}')", boxed(*point))
        }
        Action::Scroll { point, direction } => format!("scroll(start_box={}, direction='{}')", boxed(*point), direction),
        Action::Type { text, submit } => {
            let t = if *submit { format!("{text}\n") } else { text.clone() };
            format!("type(content={})", quote(&t))
        }
        Action::Open { app } => format!("open_app(app_name={})", quote(app)),
        Action::Press { button: Button::Home } => "press_home()".into(),
        Action::Press { button: Button::Back } => "press_back()".into(),
        Action::Press { button: Button::Enter } => unreachable!("ENTER is not representable"),
        Action::Wait { duration_ms: None } => "wait()".into(),
        Action::Wait { duration_ms: Some(d) } => format!("wait(duration='{d}')"),
        Action::Stop { status } => format!("finished(content={})", quote(status)),
    }
}

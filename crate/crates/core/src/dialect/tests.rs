use proptest::prelude::*;

use super::*;
use crate::action::tests::{arb_action, arb_point};
use crate::action::Direction;

fn rollout_dims() -> Dims {
    Dims::new(420.5, 728.5).unwrap()
}

fn dialects() -> [Dialect; 3] {
    [Dialect::xml_toolcall(), Dialect::thought_action(), Dialect::plain_json()]
}

fn action_of(p: &ParsedResponse) -> &Action {
    p.action.action().unwrap_or_else(|| panic!("no action: {:?}", p.action))
}

#[test]
fn xml_system_button_enter() {
    let text = "<thinking>\nThe query is typed, submit it.\n</thinking>\n<tool_call>\n\
                {\"name\": \"mobile_use\", \"arguments\": {\"action\": \"system_button\", \"button\": \"Enter\"}}\n\
                </tool_call>\n<conclusion>\npress enter\n</conclusion>";
    let p = Dialect::xml_toolcall().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Press { button: Button::Enter });
    assert_eq!(p.thought.as_deref(), Some("The query is typed, submit it."));
    assert_eq!(p.conclusion.as_deref(), Some("press enter"));
}

#[test]
fn xml_swipe_becomes_scroll_up() {
    let text = r#"<tool_call>{"name":"mobile_use","arguments":{"action":"swipe","coordinate":[259,499],"coordinate2":[267,239]}}</tool_call>"#;
    let p = Dialect::xml_toolcall().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Scroll { point: Point::new(616, 685).unwrap(), direction: Direction::Up });
}

#[test]
fn xml_click_in_native_pixels() {
    let text = r#"<tool_call>{"name":"mobile_use","arguments":{"action":"click","coordinate":[259,154]}}</tool_call>"#;
    let p = Dialect::xml_toolcall().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Click { point: Point::new(616, 211).unwrap() });
}

#[test]
fn thought_action_click() {
    let text = "Thought: tap the middle\nAction: click(start_box='<|box_start|>(500,500)<|box_end|>')";
    let p = Dialect::thought_action().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Click { point: Point::new(500, 500).unwrap() });
    assert_eq!(p.thought.as_deref(), Some("tap the middle"));
}

#[test]
fn thought_action_box_forms() {
    let d = Dialect::thought_action();
    for call in ["click(start_box='(500,500)')", "click(start_box=\"[400,400,600,600]\")", "click( start_box = '(500, 500)' )"] {
        let p = d.parse_response(&format!("Action: {call}"), rollout_dims());
        assert_eq!(action_of(&p), &Action::Click { point: Point::new(500, 500).unwrap() }, "{call}");
    }
}

#[test]
fn thought_action_drag_uses_finger_motion() {
    let text = "Action: drag(start_box='(500,800)', end_box='(500,200)')";
    let p = Dialect::thought_action().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Scroll { point: Point::new(500, 800).unwrap(), direction: Direction::Up });
}

#[test]
fn thought_action_type_submit_marker() {
    let text = "Action: type(content='coffee\\n')";
    let p = Dialect::thought_action().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Type { text: "coffee".into(), submit: true });
}

#[test]
fn plain_json_fenced() {
    let text = "```json\n{\"action\": \"open\", \"app\": \"Maps\"}\n```";
    let p = Dialect::plain_json().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Open { app: "Maps".into() });
    assert!(p.thought.is_none());
}

#[test]
fn failure_taxonomy() {
    let dims = rollout_dims();
    let xml = Dialect::xml_toolcall();
    let cases = [
        (xml, "I am not sure what to do.", FailureKind::NoAction, false),
        (xml, r#"<tool_call>{"name":"mobile_use","arguments":{"action":"click"}}</tool_call>"#, FailureKind::BadParams, true),
        (xml, r#"<tool_call>{"name":"mobile_use","arguments":{"action":"click","coordinate":[1,</tool_call>"#, FailureKind::BadParams, true),
        (xml, r#"<tool_call>{"name":"mobile_use","arguments":{"action":"answer","text":"x"}}</tool_call>"#, FailureKind::Unsupported, false),
        (Dialect::thought_action(), "Action: hotkey(key='ctrl')", FailureKind::Unsupported, false),
        (Dialect::thought_action(), "Action: scroll(start_box='(1,1)', direction='sideways')", FailureKind::BadParams, true),
        (Dialect::thought_action(), "Thought: hmm", FailureKind::NoAction, false),
        (Dialect::plain_json(), "{\"point\": [1, 2]}", FailureKind::NoAction, false),
        (Dialect::plain_json(), "{\"action\": \"CLICK\", \"point\": [1200, 2]}", FailureKind::BadParams, true),
    ];
    for (d, text, kind, recognized) in cases {
        let p = d.parse_response(text, dims);
        match &p.action {
            Decoded::Failure(f) => {
                assert_eq!(f.kind, kind, "{text}");
                assert_eq!(f.recognized(), recognized, "{text}");
            }
            Decoded::Action(a) => panic!("{text} decoded to {a}"),
        }
    }
}

#[test]
fn kinds_outside_support_are_unsupported() {
    let d = Dialect::plain_json().with_action_support(KindSet::from_kinds([ActionKind::Click]));
    let p = d.parse_response("{\"action\": \"WAIT\"}", rollout_dims());
    assert!(matches!(p.action, Decoded::Failure(ParseFailure { kind: FailureKind::Unsupported, .. })));
}

#[test]
fn multiple_tool_calls_first_wins() {
    let text = r#"<tool_call>{"name":"mobile_use","arguments":{"action":"wait"}}</tool_call>
<tool_call>{"name":"mobile_use","arguments":{"action":"terminate","status":"success"}}</tool_call>"#;
    let p = Dialect::xml_toolcall().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Wait { duration_ms: None });
    assert_eq!(p.warnings.len(), 1);
}

#[test]
fn tagless_json_is_accepted_with_warning() {
    let text = r#"Answer: {"name":"mobile_use","arguments":{"action":"system_button","button":"Back"}}"#;
    let p = Dialect::xml_toolcall().parse_response(text, rollout_dims());
    assert_eq!(action_of(&p), &Action::Press { button: Button::Back });
    assert_eq!(p.warnings.len(), 1);
}

fn golden_history() -> Vec<HistoryEntry> {
    let entry = |i, action, source| HistoryEntry { step_index: i, action, source, screenshot: PathBuf::from(format!("s{i}.png")) };
    vec![
        entry(0, Action::Click { point: Point::new(616, 211).unwrap() }, EntrySource::Reference),
        entry(
            1,
            Action::Type { text: "hello".into(), submit: false },
            EntrySource::Artifact { thought: Some("type the query".into()), conclusion: Some("typed hello".into()) },
        ),
        entry(2, Action::Scroll { point: Point::new(500, 500).unwrap(), direction: Direction::Up }, EntrySource::Reference),
        entry(
            3,
            Action::Press { button: Button::Home },
            EntrySource::Artifact { thought: Some("go home".into()), conclusion: Some("press home".into()) },
        ),
    ]
}

#[test]
fn golden_history_files() {
    let goldens = [
        (Dialect::xml_toolcall(), include_str!("../../tests/fixtures/dialect/xml-toolcall.history.txt")),
        (Dialect::thought_action(), include_str!("../../tests/fixtures/dialect/thought-action.history.txt")),
        (Dialect::plain_json(), include_str!("../../tests/fixtures/dialect/plain-json.history.txt")),
    ];
    for (d, golden) in goldens {
        assert_eq!(d.render_history(&golden_history()).unwrap(), golden, "{}", d.id);
    }
}

#[test]
fn reference_click_entry() {
    let e = &golden_history()[0];
    assert_eq!(Dialect::xml_toolcall().render_history_entry(e, 1).unwrap(), "Step 1: CLICK(point=(616,211));");
}

#[test]
fn artifact_entry_carries_conclusion() {
    let e = HistoryEntry {
        step_index: 4,
        action: Action::Press { button: Button::Enter },
        source: EntrySource::Artifact { thought: None, conclusion: Some("press enter".into()) },
        screenshot: PathBuf::from("s.png"),
    };
    let s = Dialect::xml_toolcall().render_history_entry(&e, 5).unwrap();
    assert!(s.contains("press enter"), "{s}");
    assert!(matches!(
        Dialect::thought_action().render_history_entry(&e, 5),
        Err(DialectError::Unrepresentable { .. })
    ));
}

#[test]
fn empty_history_is_empty() {
    for d in dialects() {
        assert_eq!(d.render_history(&[]).unwrap(), "");
    }
}

#[test]
fn fixed_thought_prefixes() {
    let ta = Dialect::thought_action().render_fixed_thought("T").unwrap();
    assert!(ta.text.ends_with("Thought: T\nAction:"));
    assert!(!ta.empty);
    let xml = Dialect::xml_toolcall().render_fixed_thought("T").unwrap();
    assert!(xml.text.contains("<thinking>\nT\n</thinking>"));
    let empty = Dialect::xml_toolcall().render_fixed_thought("").unwrap();
    assert!(empty.empty);
    assert!(empty.text.contains("<thinking>\n\n</thinking>"));
    assert!(matches!(
        Dialect::plain_json().render_fixed_thought("T"),
        Err(DialectError::UnsupportedFeature { .. })
    ));
}

#[test]
fn fixed_thought_then_generated_action_parses() {
    let d = Dialect::thought_action();
    let prefix = d.render_fixed_thought("open the app").unwrap().text;
    let full = format!("{prefix} open_app(app_name='Clock')");
    let p = d.parse_response(&full, rollout_dims());
    assert_eq!(action_of(&p), &Action::Open { app: "Clock".into() });
    assert_eq!(p.thought.as_deref(), Some("open the app"));
}

#[test]
fn fuzz_totality() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let alphabet: Vec<char> = "{}[]()<>\"':,=\\/ \n_-.0123456789abcdeflnorstuwxyACKLT|".chars().collect();
    let fragments = [
        "<tool_call>", "</tool_call>", "<thinking>", "Action:", "Thought:", "\"action\":", "click(",
        "start_box='", "<|box_start|>", "\"coordinate\":[", "swipe", "drag(", "```json",
    ];
    let dims = rollout_dims();
    for _ in 0..100_000 {
        let mut s = String::new();
        for _ in 0..rng.gen_range(0..40) {
            if rng.gen_bool(0.2) {
                s.push_str(fragments[rng.gen_range(0..fragments.len())]);
            } else {
                s.push(alphabet[rng.gen_range(0..alphabet.len())]);
            }
        }
        for d in dialects() {
            let p = d.parse_response(&s, dims);
            if let Decoded::Action(a) = &p.action {
                assert!(d.action_support.contains(a.kind()));
            }
        }
    }
}

fn arb_dims() -> impl Strategy<Value = Dims> {
    (100.0f64..3000.0, 100.0f64..3000.0).prop_map(|(w, h)| Dims::new(w, h).unwrap())
}

proptest! {
    #[test]
    fn round_trip_every_dialect(a in arb_action(), dims in arb_dims(), per_mille in any::<bool>()) {
        for d in dialects() {
            let d = if per_mille { d.with_coordinate_space(CoordinateSpace::PerMille) } else { d };
            if !d.can_represent(&a) {
                continue;
            }
            let text = d.render_response(&a, d.supports_thought().then_some("because"), None, dims).unwrap();
            let p = d.parse_response(&text, dims);
            prop_assert_eq!(p.action.action(), Some(&a), "{} {}", d.id, text);
        }
    }

    #[test]
    fn native_coordinates_commute(x in 0.0f64..3000.0, y in 0.0f64..3000.0, dims in arb_dims()) {
        let text = format!(
            r#"<tool_call>{{"name":"mobile_use","arguments":{{"action":"click","coordinate":[{x},{y}]}}}}</tool_call>"#
        );
        let p = Dialect::xml_toolcall().parse_response(&text, dims);
        let expected = normalize_point((x, y), dims).unwrap().point;
        prop_assert_eq!(p.action.action(), Some(&Action::Click { point: expected }));
    }

    #[test]
    fn per_mille_points_parse_back(p in arb_point()) {
        let text = format!("Action: long_press(start_box='({},{})')", p.x, p.y);
        let parsed = Dialect::thought_action().parse_response(&text, rollout_dims());
        prop_assert_eq!(parsed.action.action(), Some(&Action::LongPress { point: p, duration_ms: None }));
    }
}

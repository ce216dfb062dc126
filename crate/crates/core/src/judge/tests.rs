use std::sync::Arc;

use super::*;
use crate::action::{Direction, Point};
use crate::gateway::mock::{render_reply, MockBackend};
use crate::gateway::{EndpointConfig, GenerationRequest};

fn click(x: i64, y: i64) -> Action {
    Action::Click { point: Point::new(x, y).unwrap() }
}

fn case(dir: &Path, id: &str, executed: Option<Action>) -> ConsistencyCase {
    let shot = dir.join(format!("{id}.png"));
    std::fs::write(&shot, b"png").unwrap();
    ConsistencyCase {
        id: id.into(),
        instruction: "Open the settings".into(),
        screenshot: shot,
        dims: Dims::new(1000.0, 1000.0).unwrap(),
        text_desc: None,
        reasoning_trace: "I will tap the gear icon.".into(),
        executed_action: executed,
        human_label: None,
    }
}

/// A judge whose sample `s` for case `id` is `script(id, s)`; `None`
/// produces unparseable text.
fn gateway<F>(script: F) -> Gateway
where
    F: Fn(&str, u32) -> Option<Action> + Send + Sync + 'static,
{
    let d = Dialect::xml_toolcall();
    let agent = move |req: &GenerationRequest, s: u32| match script(&req.meta.step.episode_id, s) {
        Some(a) => render_reply(&d, req, &a),
        None => Ok("I am not sure.".to_string()),
    };
    Gateway::new(Arc::new(MockBackend::new(Arc::new(agent))), EndpointConfig { backoff_ms: 0, ..Default::default() }).unwrap()
}

fn judge<'a>(name: &str, gw: &'a Gateway) -> Judge<'a> {
    Judge { name: name.into(), gateway: gw, dialect: Dialect::xml_toolcall(), seed: 7 }
}

#[test]
fn single_action_majority() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(|_, _| Some(click(300, 400)));
    let m = judge_majority(&judge("a", &gw), &case(dir.path(), "c1", None), 32, &ClusterConfig::default()).unwrap();
    assert_eq!((m.action, m.mass, m.tie, m.parsed, m.rollouts), (Some(click(300, 400)), 1.0, false, 32, 32));
}

#[test]
fn plurality_and_tie() {
    let dir = tempfile::tempdir().unwrap();
    let c = case(dir.path(), "c1", None);
    let cfg = ClusterConfig::default();
    let gw = gateway(|_, s| Some(if s < 12 { click(800, 800) } else { click(100, 100) }));
    let m = judge_majority(&judge("a", &gw), &c, 32, &cfg).unwrap();
    assert_eq!((m.action, m.mass, m.tie), (Some(click(100, 100)), 20.0 / 32.0, false));
    // the canonical encoding decides ties: "(100,100)" sorts before "(800,800)"
    let gw = gateway(|_, s| Some(if s % 2 == 0 { click(800, 800) } else { click(100, 100) }));
    let m = judge_majority(&judge("a", &gw), &c, 32, &cfg).unwrap();
    assert_eq!((m.action, m.tie), (Some(click(100, 100)), true));
    let gw = gateway(|_, s| (s >= 20).then(|| click(500, 500)));
    let m = judge_majority(&judge("a", &gw), &c, 32, &cfg).unwrap();
    assert_eq!((m.action, m.mass, m.parsed), (Some(click(500, 500)), 12.0 / 32.0, 12));
}

#[test]
fn abstention_and_undecidable() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(|_, _| None);
    let c = case(dir.path(), "c1", Some(click(1, 1)));
    let m = judge_majority(&judge("a", &gw), &c, 8, &ClusterConfig::default()).unwrap();
    assert!(m.abstained());
    let err = two_stage_verdict("c1", vec![m.clone(), m], c.executed_action.as_ref(), &MatchPolicy::default());
    assert!(matches!(err, Err(JudgeError::Undecidable(_))));
    let mut empty = c.clone();
    empty.reasoning_trace = "  ".into();
    assert!(matches!(judge_majority(&judge("a", &gw), &empty, 8, &ClusterConfig::default()), Err(JudgeError::EmptyTrace(_))));
}

#[test]
fn judge_sees_pinned_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dialect::xml_toolcall();
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    let agent = move |req: &GenerationRequest, _s: u32| {
        log.lock().unwrap().push(req.fixed_thought.as_ref().map(|f| f.text.clone()));
        render_reply(&d, req, &click(5, 5))
    };
    let gw = Gateway::new(Arc::new(MockBackend::new(Arc::new(agent))), EndpointConfig::default()).unwrap();
    judge_majority(&judge("a", &gw), &case(dir.path(), "c1", None), 4, &ClusterConfig::default()).unwrap();
    let seen = seen.lock().unwrap();
    assert!(seen.iter().all(|t| t.as_deref().is_some_and(|t| t.contains("I will tap the gear icon."))));
}

fn majority(judge: &str, a: Option<Action>) -> MajorityDecision {
    MajorityDecision { judge: judge.into(), mass: 1.0, tie: false, parsed: 1, rollouts: 1, action: a }
}

#[test]
fn three_judge_plurality_table() {
    let options = [click(100, 100), click(900, 900), Action::Scroll { point: Point::new(500, 500).unwrap(), direction: Direction::Up }];
    let policy = MatchPolicy::default();
    for i in 0..27usize {
        let labels = [i % 3, i / 3 % 3, i / 9];
        let ms: Vec<_> = labels.iter().enumerate().map(|(j, &l)| majority(&format!("j{j}"), Some(options[l].clone()))).collect();
        let mut counts = [0usize; 3];
        for &l in &labels {
            counts[l] += 1;
        }
        let top = *counts.iter().max().unwrap();
        let winners: Vec<usize> = (0..3).filter(|&k| counts[k] == top).collect();
        let expected = (winners.len() == 1).then(|| options[winners[0]].clone());
        for executed in 0..3 {
            let v = two_stage_verdict("c", ms.clone(), Some(&options[executed]), &policy).unwrap();
            assert_eq!(v.consensus, expected, "{labels:?}");
            assert_eq!(v.consistent, expected.as_ref() == Some(&options[executed]));
            assert_eq!(v.consensus_tie, expected.is_none());
        }
    }
}

#[test]
fn verdict_examples() {
    let policy = MatchPolicy::default();
    let agree = || vec![majority("a", Some(click(300, 300))), majority("b", Some(click(310, 305))), majority("c", Some(click(298, 300)))];
    let v = two_stage_verdict("c", agree(), Some(&click(320, 300)), &policy).unwrap();
    assert!(v.consistent && v.failure.is_none());
    let v = two_stage_verdict("c", agree(), Some(&click(700, 300)), &policy).unwrap();
    assert_eq!((v.consistent, v.failure), (false, Some(FailureClass::ActionTargetMismatch)));
    let scroll = Action::Scroll { point: Point::new(300, 300).unwrap(), direction: Direction::Down };
    let v = two_stage_verdict("c", agree(), Some(&scroll), &policy).unwrap();
    assert_eq!(v.failure, Some(FailureClass::ActionTypeMismatch));
    let v = two_stage_verdict("c", agree(), None, &policy).unwrap();
    assert_eq!(v.failure, Some(FailureClass::InvalidAction));
    // one abstaining judge does not block the others
    let ms = vec![majority("a", None), majority("b", Some(click(300, 300)))];
    assert!(two_stage_verdict("c", ms, Some(&click(300, 300)), &policy).unwrap().consistent);
}

#[test]
fn failure_taxonomy_is_total() {
    let kinds = [Some(click(1, 1)), Some(click(900, 1)), Some(Action::Wait { duration_ms: None }), None];
    for c in kinds.iter().flatten() {
        for e in &kinds {
            let class = classify_failure(c, e.as_ref());
            let expected = match e {
                None => FailureClass::InvalidAction,
                Some(e) if e.kind() != c.kind() => FailureClass::ActionTypeMismatch,
                Some(_) => FailureClass::ActionTargetMismatch,
            };
            assert_eq!(class, expected);
        }
    }
}

#[test]
fn detector_rates() {
    let r = detector_report(ConfusionMatrix { tp: 273, fn_: 51, fp: 15, tn: 309 });
    assert!((r.accuracy.estimate.unwrap() - 0.898).abs() < 5e-4);
    assert!((r.tpr.estimate.unwrap() - 0.843).abs() < 5e-4);
    assert!((r.tnr.estimate.unwrap() - 0.954).abs() < 5e-4);
    let perfect = detector_report(ConfusionMatrix { tp: 40, fn_: 0, fp: 0, tn: 40 });
    assert_eq!(perfect.accuracy.estimate, Some(1.0));
    assert_eq!(perfect.accuracy.ci.unwrap().1, 1.0);
    let one_class = detector_report(ConfusionMatrix { tp: 3, fn_: 1, fp: 0, tn: 0 });
    assert_eq!((one_class.tnr.estimate, one_class.tnr.ci), (None, None));
}

#[test]
fn end_to_end_validation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    // judges follow the trace: they click (200,200) for even cases, scroll otherwise
    let follow = |id: &str, s: u32| {
        let k: usize = id[1..].parse().unwrap();
        Some(if k % 2 == 0 || s % 4 == 3 { click(200, 200) } else { Action::Wait { duration_ms: None } })
    };
    let gws = [gateway(follow), gateway(follow), gateway(move |id, s| follow(id, s + 1))];
    let judges: Vec<Judge<'_>> = gws.iter().enumerate().map(|(i, g)| judge(&format!("j{i}"), g)).collect();
    let cases: Vec<ConsistencyCase> = (0..12)
        .map(|k| {
            let mut c = case(dir.path(), &format!("c{k}"), Some(click(205, 200)));
            c.human_label = Some(if k % 2 == 0 { ConsistencyLabel::Consistent } else { ConsistencyLabel::Inconsistent });
            c
        })
        .collect();
    let run = || -> Vec<JudgeVerdict> {
        judge_cases(&judges, &cases, 32, &ClusterConfig::default(), &MatchPolicy::default()).into_iter().map(Result::unwrap).collect()
    };
    let (v1, v2) = (run(), run());
    assert_eq!(v1, v2);
    let report = detector_validation(&cases, &v1);
    assert_eq!(report.matrix, ConfusionMatrix { tp: 6, fn_: 0, fp: 0, tn: 6 });
    assert!(v1.iter().filter(|v| !v.consistent).all(|v| v.failure == Some(FailureClass::ActionTypeMismatch)));

    let path = dir.path().join("cases.jsonl");
    let body: String = cases.iter().map(|c| serde_json::to_string(c).unwrap() + "\n\n").collect();
    std::fs::write(&path, body).unwrap();
    assert_eq!(load_cases(&path).unwrap(), cases);
    let mut buf = Vec::new();
    write_verdicts_csv(&mut buf, &v1).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("case_id,consistent,consensus,consensus_tie,failure,per_judge\n"));
    assert!(text.contains("c0,true,\"CLICK(point=(200,200))\",false,,\"j0=CLICK(point=(200,200));"), "{text}");
    assert!(text.contains("c1,false,WAIT(),false,action_type_mismatch,j0=WAIT();j1=WAIT();j2=WAIT()"), "{text}");
}

//! Chat client against a scripted local HTTP server.

mod common;

use tesr_core::data::{Event, EventSequence};
use tesr_core::synth::{
    llm_describe, parse_judge_scores, rubric_evaluate, DomainSpec,
};
use tesr_core::Error;

use common::{completion, mock_client as client, serve};

fn quake() -> EventSequence {
    EventSequence::new(
        "q",
        "us_earthquake",
        vec![Event::new(0.0, "Medium"), Event::new(0.66, "Large"), Event::new(0.72, "Large")],
    )
}

#[test]
fn success_returns_content_and_sends_prompt() {
    let (url, seen) = serve(vec![(200, completion("  Two large quakes follow a medium one.  "))]);
    let out = llm_describe(&quake(), &DomainSpec::us_earthquake(), &client(url)).unwrap();
    assert_eq!(out, "Two large quakes follow a medium one.");
    let req: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(req["messages"][0]["role"], "system");
    let user = req["messages"][1]["content"].as_str().unwrap();
    assert!(user.ends_with("0.00,Medium\n0.66,Large\n0.72,Large"));
}

#[test]
fn server_error_is_retried() {
    let (url, seen) = serve(vec![(500, "{}".into()), (200, completion("ok"))]);
    assert_eq!(client(url).complete("s", "u").unwrap(), "ok");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![(503, "{}".into()); 3]);
    assert!(matches!(client(url).complete("s", "u"), Err(Error::Transport(_))));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, completion("late"))]);
    assert!(matches!(client(url).complete("s", "u"), Err(Error::Transport(_))));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn empty_completion_is_an_error() {
    let (url, _) = serve(vec![(200, completion("   "))]);
    assert!(matches!(client(url).complete("s", "u"), Err(Error::EmptyCompletion)));
}

#[test]
fn judge_scores_round_trip() {
    let (url, _) = serve(vec![(200, completion("5,5,5,5,5"))]);
    let s = rubric_evaluate("desc", &quake(), &DomainSpec::us_earthquake(), &client(url)).unwrap();
    assert_eq!(s.as_array(), [5; 5]);
}

#[test]
fn judge_out_of_range_keeps_payload() {
    let (url, _) = serve(vec![(200, completion("accuracy=6; coverage=5; fidelity=5; clarity=5; conciseness=5"))]);
    match rubric_evaluate("desc", &quake(), &DomainSpec::us_earthquake(), &client(url)) {
        Err(Error::JudgeParse { message, raw }) => {
            assert!(message.contains("score out of range"));
            assert!(raw.starts_with("accuracy=6"));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_judge_scores("1,2,3,4").is_err());
}

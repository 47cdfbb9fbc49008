use std::collections::BTreeMap;

use coconstruct_core::backends::{BackendConfig, BackendKind};
use coconstruct_core::graph::{ArtifactId, Provenance};
use coconstruct_core::session::{
    load_session, mock_backends, replay, save_session, verify_replay, EventBody, Feedback, IterationStatus,
    ReviewerMode, Session, SessionError, SessionPolicy, SessionState, SessionStatus, SystemEvent,
};
use coconstruct_core::PreferenceSource;

const STATEMENT: &str = "Write a command-line tool that counts word frequencies in a text file.";

fn policy(mode: ReviewerMode, k: usize) -> SessionPolicy {
    SessionPolicy {
        reviewer_mode: mode,
        sample_count: k,
        ..SessionPolicy::default()
    }
}

fn lazy(k: usize, seed: u64) -> Session {
    Session::create(STATEMENT, policy(ReviewerMode::Lazy, k), mock_backends(), seed, None).unwrap()
}

fn level_count(state: &SessionState, level: usize) -> usize {
    state.graph.artifacts.values().filter(|a| a.level == level).count()
}

fn finalists(session: &Session) -> (ArtifactId, ArtifactId) {
    session.state().current_finalists.unwrap()
}

#[test]
fn create_respects_reviewer_mode() {
    let pre = Session::create(STATEMENT, policy(ReviewerMode::Preemptive, 4), mock_backends(), 1, None).unwrap();
    assert_eq!(pre.state().status, SessionStatus::AwaitingSpecReview);
    assert_eq!(pre.state().graph.len(), 1);
    assert_eq!(level_count(pre.state(), 0), 1);

    let lazy = lazy(4, 1);
    assert_eq!(lazy.state().status, SessionStatus::Generating);
}

#[test]
fn empty_statement_is_rejected() {
    let err = Session::create("   ", SessionPolicy::default(), mock_backends(), 1, None).unwrap_err();
    assert_eq!(err.code(), "validation");
}

#[test]
fn policy_bounds_are_enforced() {
    for bad in [
        SessionPolicy { sample_count: 1, ..SessionPolicy::default() },
        SessionPolicy { max_iterations: 0, ..SessionPolicy::default() },
        SessionPolicy { judge_backend: "missing".into(), ..SessionPolicy::default() },
    ] {
        assert!(Session::create(STATEMENT, bad, mock_backends(), 1, None).is_err());
    }
}

#[test]
fn failed_specification_leaves_an_aborted_session() {
    let mut backends = mock_backends();
    backends.get_mut("mock").unwrap().mock.fail_generation_at_level = Some(0);
    let session = Session::create(STATEMENT, SessionPolicy::default(), backends, 1, None).unwrap();
    assert_eq!(session.state().status, SessionStatus::Aborted);
    assert!(session.state().last_error.is_some());
    assert!(session.state().graph.is_empty());
}

#[test]
fn spec_edit_adds_a_human_artifact_and_refinements_follow_it() {
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Preemptive, 4), mock_backends(), 3, None).unwrap();
    let original = session.state().current_spec.unwrap();
    let edited = session.edit_specification("Count words, ignoring case and punctuation.").unwrap();
    assert_ne!(original, edited);
    assert_eq!(level_count(session.state(), 0), 2);
    assert_eq!(session.state().graph.get(edited).unwrap().provenance, Provenance::HumanEdited);
    assert_eq!(session.state().status, SessionStatus::Generating);

    let record = session.run_iteration().unwrap().clone();
    for id in record.candidate_ids {
        assert_eq!(session.state().graph.abstraction_of(id).unwrap(), Some(edited));
    }
}

#[test]
fn identical_spec_edit_is_rejected() {
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Preemptive, 4), mock_backends(), 3, None).unwrap();
    let current = session.state().graph.get(session.state().current_spec.unwrap()).unwrap().content.clone();
    let before = session.state().clone();
    assert_eq!(session.edit_specification(&current).unwrap_err().code(), "validation");
    assert_eq!(session.state(), &before);
}

#[test]
fn spec_edit_after_review_is_wrong_status() {
    let mut session = lazy(4, 3);
    session.run_iteration().unwrap();
    let err = session.edit_specification("something else").unwrap_err();
    assert!(matches!(err, SessionError::WrongStatus { .. }));
    assert!(err.to_string().contains("wrong status"));
}

#[test]
fn approval_moves_to_generating() {
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Preemptive, 4), mock_backends(), 3, None).unwrap();
    assert!(session.run_iteration().is_err());
    session.approve_specification().unwrap();
    assert_eq!(session.state().status, SessionStatus::Generating);
    assert!(session.approve_specification().is_err());
}

#[test]
fn first_iteration_with_sixteen_samples() {
    let mut session = lazy(16, 11);
    let record = session.run_iteration().unwrap().clone();
    let state = session.state();
    assert_eq!(record.candidate_ids.len(), 16);
    assert_eq!(level_count(state, 1), 16);
    let outcome = record.tournament_outcome.as_ref().unwrap();
    assert_eq!(outcome.match_log.len(), 14);
    assert!(!outcome.summary.is_empty());
    assert!(outcome.summary.chars().count() <= state.policy.summary_budget);
    assert_eq!(level_count(state, 2), 2);
    assert_eq!(state.preference_log.len(), 14);
    assert!(state.preference_log.iter().all(|r| r.source == PreferenceSource::Judge));
    assert_eq!(state.status, SessionStatus::AwaitingHumanFeedback);
    assert!(state.utility_snapshot.is_some());

    let (a, b) = record.finalist_program_ids.unwrap();
    assert_eq!(state.current_finalists, Some((a, b)));
    assert_eq!(state.graph.ancestor_at(a, 1).unwrap(), Some(outcome.finalists.0));
    assert_eq!(state.graph.ancestor_at(b, 1).unwrap(), Some(outcome.finalists.1));

    let judged = state
        .event_log
        .iter()
        .filter(|e| matches!(e.body, EventBody::System(SystemEvent::MatchJudged { .. })))
        .count();
    assert_eq!(judged, 14);
}

#[test]
fn iteration_while_awaiting_feedback_is_rejected() {
    let mut session = lazy(4, 2);
    session.run_iteration().unwrap();
    let before = session.state().clone();
    assert!(matches!(session.run_iteration(), Err(SessionError::WrongStatus { .. })));
    assert_eq!(session.state(), &before);
}

#[test]
fn binary_choice_adds_program_and_lifted_records() {
    let mut session = lazy(8, 5);
    session.run_iteration().unwrap();
    let (a, b) = finalists(&session);
    let before = session.state().preference_log.len();
    session
        .apply_feedback(Feedback::BinaryChoice {
            chosen: b,
            justification: Some("handles empty files".into()),
        })
        .unwrap();
    let state = session.state();
    assert_eq!(state.preference_log.len(), before + 2);
    let human: Vec<_> = state.preference_log[before..].to_vec();
    assert!(human.iter().all(|r| r.source == PreferenceSource::Human));
    assert_eq!((human[0].winner_id, human[0].loser_id), (b, a));
    let lift = |id| state.graph.ancestor_at(id, 1).unwrap().unwrap();
    assert_eq!((human[1].winner_id, human[1].loser_id), (lift(b), lift(a)));
    assert_eq!(state.status, SessionStatus::Generating);
    assert_eq!(state.iterations[0].human_feedback_indices.len(), 1);
}

#[test]
fn choosing_a_non_finalist_fails() {
    let mut session = lazy(4, 5);
    let record = session.run_iteration().unwrap().clone();
    let before = session.state().clone();
    let err = session
        .apply_feedback(Feedback::BinaryChoice {
            chosen: record.candidate_ids[0],
            justification: None,
        })
        .unwrap_err();
    assert!(matches!(err, SessionError::NotFinalist(_)));
    assert_eq!(session.state(), &before);
}

#[test]
fn direct_edit_adds_artifact_and_implicit_preference() {
    let mut session = lazy(4, 9);
    session.run_iteration().unwrap();
    let (a, _) = finalists(&session);
    let original = session.state().graph.get(a).unwrap().clone();
    let graph_before = session.state().graph.len();
    let content = format!("{}\n# handles unicode input\n", session.state().display_content(a).unwrap());
    session
        .apply_feedback(Feedback::DirectEdit {
            target: a,
            content: content.clone(),
            diff: String::new(),
        })
        .unwrap();
    let state = session.state();
    assert_eq!(state.graph.len(), graph_before + 1);
    let record = state.preference_log.last().unwrap();
    assert_eq!(record.loser_id, a);
    assert_eq!(record.source, PreferenceSource::Human);
    let edited = state.graph.get(record.winner_id).unwrap();
    assert_eq!(edited.level, original.level);
    assert_eq!(edited.parent_id, original.parent_id);
    assert_eq!(edited.provenance, Provenance::HumanEdited);
    assert_eq!(edited.content, content);

    match &state.event_log.iter().rev().find(|e| e.is_feedback()).unwrap().body {
        EventBody::Feedback(Feedback::DirectEdit { diff, .. }) => {
            assert!(diff.contains("+# handles unicode input"), "{diff}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn direct_edit_validation() {
    let mut session = lazy(4, 9);
    session.run_iteration().unwrap();
    let (a, _) = finalists(&session);
    let same = session.state().graph.get(a).unwrap().content.clone();
    let before = session.state().clone();
    for bad in [
        Feedback::DirectEdit { target: a, content: same, diff: String::new() },
        Feedback::DirectEdit { target: ArtifactId(999), content: "x".into(), diff: String::new() },
        Feedback::DirectEdit { target: session.state().current_spec.unwrap(), content: "x".into(), diff: String::new() },
    ] {
        assert!(session.apply_feedback(bad).is_err());
        assert_eq!(session.state(), &before);
    }
}

#[test]
fn second_iteration_context_carries_summary_and_critique() {
    let mut session = lazy(8, 21);
    session.run_iteration().unwrap();
    let summary = session.state().iterations[0].tournament_outcome.as_ref().unwrap().summary.clone();
    let critique = "Prefer streaming the file instead of reading it whole.";
    session
        .apply_feedback(Feedback::NlCritique {
            text: critique.into(),
            target: None,
        })
        .unwrap();
    session.run_iteration().unwrap();
    let context = &session.state().iterations[1].context_summary;
    assert!(context.contains(&summary));
    assert!(context.contains(critique));
    assert!(session.state().iterations[0].context_summary.is_empty());
}

#[test]
fn context_respects_budget() {
    let mut p = policy(ReviewerMode::Lazy, 4);
    p.context_budget = 200;
    let mut session = Session::create(STATEMENT, p, mock_backends(), 4, None).unwrap();
    session.run_iteration().unwrap();
    for i in 0..20 {
        session
            .apply_feedback(Feedback::NlCritique {
                text: format!("critique number {i} with some padding text"),
                target: None,
            })
            .unwrap();
    }
    let context = session.state().next_context();
    assert!(context.chars().count() <= 200);
    assert!(context.contains("critique number 19"));
    assert!(!context.contains("critique number 0 "));
}

#[test]
fn accept_and_abort_are_terminal() {
    let mut session = lazy(4, 6);
    session.run_iteration().unwrap();
    let (a, _) = finalists(&session);
    session.apply_feedback(Feedback::Accept { chosen: a }).unwrap();
    assert_eq!(session.state().status, SessionStatus::Accepted);
    assert_eq!(session.state().accepted, Some(a));
    assert!(session.apply_feedback(Feedback::Abort { reason: None }).is_err());
    assert!(session.run_iteration().is_err());

    let mut other = lazy(4, 6);
    other.apply_feedback(Feedback::Abort { reason: Some("done".into()) }).unwrap();
    assert_eq!(other.state().status, SessionStatus::Aborted);
}

#[test]
fn iteration_limit() {
    let mut p = policy(ReviewerMode::Lazy, 2);
    p.max_iterations = 1;
    let mut session = Session::create(STATEMENT, p, mock_backends(), 4, None).unwrap();
    session.run_iteration().unwrap();
    session
        .apply_feedback(Feedback::NlCritique { text: "more".into(), target: None })
        .unwrap();
    assert!(matches!(session.run_iteration(), Err(SessionError::IterationLimit(1))));
}

#[test]
fn generation_failure_mid_iteration_keeps_partial_artifacts() {
    let mut backends = mock_backends();
    backends.get_mut("mock").unwrap().mock.fail_generation_at_level = Some(2);
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Lazy, 4), backends, 8, None).unwrap();
    let err = session.run_iteration().unwrap_err();
    assert_eq!(err.code(), "backend-failure");
    let state = session.state();
    assert_eq!(state.status, SessionStatus::Generating);
    assert_eq!(state.iterations.len(), 1);
    assert_eq!(state.iterations[0].status, IterationStatus::Failed);
    assert!(state.iterations[0].error.is_some());
    assert_eq!(level_count(state, 1), 4);
    assert_eq!(state.preference_log.len(), 2);
    for id in &state.iterations[0].candidate_ids {
        assert_eq!(state.graph.get(*id).unwrap().metadata["iteration-status"], "failed");
    }
    assert!(matches!(
        state.event_log.last().unwrap().body,
        EventBody::System(SystemEvent::IterationFailed { .. })
    ));
}

#[test]
fn judge_failure_records_failed_iteration() {
    let mut backends = mock_backends();
    backends.get_mut("mock").unwrap().mock.fail_judging = true;
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Lazy, 4), backends, 8, None).unwrap();
    assert!(session.run_iteration().is_err());
    assert_eq!(session.state().status, SessionStatus::Generating);
    assert_eq!(session.state().iterations[0].status, IterationStatus::Failed);
    assert!(session.state().preference_log.is_empty());
}

fn two_iteration_session(seed: u64) -> Session {
    let mut session = lazy(8, seed);
    session.run_iteration().unwrap();
    let (a, _) = finalists(&session);
    session
        .apply_feedback(Feedback::BinaryChoice { chosen: a, justification: Some("clearer".into()) })
        .unwrap();
    session.run_iteration().unwrap();
    session
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let session = two_iteration_session(17);
    save_session(session.state(), &path).unwrap();
    let loaded = load_session(&path).unwrap();
    assert_eq!(&loaded, session.state());
    assert_eq!(loaded.to_json(), std::fs::read_to_string(&path).unwrap());

    let text = loaded.to_json();
    let positions: Vec<usize> = ["schema_version", "session", "graph", "events", "iterations"]
        .iter()
        .map(|key| text.find(&format!("\n  \"{key}\":")).expect(key))
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn truncated_file_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let text = lazy(4, 1).state().to_json();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert_eq!(load_session(&path).unwrap_err().code(), "schema");
}

#[test]
fn wrong_schema_version_is_refused() {
    let text = lazy(4, 1).state().to_json().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    let err = SessionState::from_json(&text).unwrap_err();
    assert_eq!(err.code(), "schema");
    assert!(err.to_string().contains("99"));
}

#[test]
fn dangling_reference_is_refused_with_findings() {
    let mut session = lazy(4, 1);
    session.run_iteration().unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&session.state().to_json()).unwrap();
    let artifacts = value["graph"]["artifacts"].as_object_mut().unwrap();
    let (_, level1) = artifacts.iter_mut().find(|(_, a)| a["level"] == 1).unwrap();
    level1["parent_id"] = serde_json::json!("4242");
    let err = SessionState::from_json(&value.to_string()).unwrap_err();
    match err {
        SessionError::InvalidFile(report) => assert!(report.to_string().contains("4242")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dangling_preference_reference_is_refused() {
    let mut session = lazy(4, 1);
    session.run_iteration().unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&session.state().to_json()).unwrap();
    value["session"]["preference_log"][0]["winner_id"] = serde_json::json!("777");
    assert!(SessionState::from_json(&value.to_string()).is_err());
}

#[test]
fn replay_reproduces_bytes() {
    let mut session = lazy(6, 31);
    session.run_iteration().unwrap();
    let (_, b) = finalists(&session);
    session
        .apply_feedback(Feedback::BinaryChoice { chosen: b, justification: None })
        .unwrap();
    let state = session.state();
    let rebuilt = replay(&state.event_log, &state.policy, &state.backends, state.seed).unwrap();
    assert_eq!(rebuilt.to_json(), state.to_json());
    verify_replay(state).unwrap();
}

#[test]
fn replay_covers_spec_edits_and_direct_edits() {
    let mut session = Session::create(STATEMENT, policy(ReviewerMode::Preemptive, 4), mock_backends(), 2, None).unwrap();
    session.edit_specification("Count words per line as well.").unwrap();
    session.run_iteration().unwrap();
    let (a, _) = finalists(&session);
    session
        .apply_feedback(Feedback::DirectEdit {
            target: a,
            content: "print('edited')".into(),
            diff: String::new(),
        })
        .unwrap();
    session
        .apply_feedback(Feedback::ExecutionReport {
            target: a,
            ran: true,
            failed: true,
            log_excerpt: "Traceback".into(),
        })
        .unwrap();
    session.run_iteration().unwrap();
    verify_replay(session.state()).unwrap();
}

#[test]
fn replay_with_another_seed_is_detected() {
    let session = two_iteration_session(40);
    let state = session.state();
    let err = replay(&state.event_log, &state.policy, &state.backends, state.seed + 1).unwrap_err();
    assert_eq!(err.code(), "determinism");

    let mut altered = state.clone();
    altered.seed += 1;
    assert!(verify_replay(&altered).is_err());
}

#[test]
fn replay_detects_index_gaps() {
    let session = two_iteration_session(40);
    let state = session.state();
    let mut events = state.event_log.clone();
    events.remove(5);
    let err = replay(&events, &state.policy, &state.backends, state.seed).unwrap_err();
    assert!(err.to_string().contains("gap in event indices"), "{err}");
}

#[test]
fn replay_refuses_live_backends() {
    let session = lazy(4, 1);
    let state = session.state();
    let mut backends = state.backends.clone();
    backends.insert("mock".into(), BackendConfig::http_chat("http://127.0.0.1:9/v1", "m"));
    assert_eq!(backends["mock"].kind, BackendKind::HttpChat);
    let err = replay(&state.event_log, &state.policy, &backends, state.seed).unwrap_err();
    assert!(matches!(err, SessionError::NonDeterministic(_)));
}

#[test]
fn session_file_never_holds_credentials() {
    let mut backends: BTreeMap<String, BackendConfig> = mock_backends();
    let mut live = BackendConfig::http_chat("http://127.0.0.1:9/v1", "m");
    live.auth_env_var = Some("COCONSTRUCT_TEST_KEY".into());
    backends.insert("live".into(), live);
    std::env::set_var("COCONSTRUCT_TEST_KEY", "sk-secret-value");
    let session = Session::create(STATEMENT, SessionPolicy::default(), backends, 1, None).unwrap();
    let json = session.state().to_json();
    assert!(json.contains("COCONSTRUCT_TEST_KEY"));
    assert!(!json.contains("sk-secret-value"));
}

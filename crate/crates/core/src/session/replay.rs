//! Rebuilding a session from its event log.
//!
//! Only commands are re-executed: session creation, spec approval, iteration
//! starts and expert feedback. Everything else in the log is output of those
//! commands and must be regenerated identically.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Event, EventBody, Session, SessionError, SessionPolicy, SessionState, SystemEvent};
use crate::backends::BackendConfig;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn log_hash(events: &[Event]) -> String {
    sha256_hex(serde_json::to_string(events).expect("events serialize").as_bytes())
}

/// Re-executes `events` against fresh deterministic backends. Fails when the
/// regenerated log differs from the given one.
pub fn replay(
    events: &[Event],
    policy: &SessionPolicy,
    backends: &BTreeMap<String, BackendConfig>,
    seed: u64,
) -> Result<SessionState, SessionError> {
    for (position, event) in events.iter().enumerate() {
        if event.event_index != position as u64 {
            return Err(SessionError::EventGap {
                expected: position as u64,
                found: event.event_index,
            });
        }
    }
    for name in [&policy.generator_backend, &policy.judge_backend] {
        let config = backends
            .get(name)
            .ok_or_else(|| SessionError::Validation(format!("no backend named {name}")))?;
        if !config.is_deterministic() {
            return Err(SessionError::NonDeterministic(name.clone()));
        }
    }
    let (session_id, statement) = match events.first().map(|e| &e.body) {
        Some(EventBody::System(SystemEvent::SessionCreated {
            session_id,
            problem_statement,
            ..
        })) => (session_id.clone(), problem_statement.clone()),
        _ => return Err(SessionError::Validation("event log must start with session-created".into())),
    };

    let mut session = Session::create(&statement, policy.clone(), backends.clone(), seed, Some(session_id))?;
    loop {
        let produced = session.state().event_log.len();
        check_kinds(events, &session.state().event_log)?;
        let Some(next) = events.get(produced) else { break };
        match &next.body {
            EventBody::System(SystemEvent::SpecificationApproved) => {
                session.approve_specification().map_err(|e| diverged(produced, e))?
            }
            EventBody::System(SystemEvent::IterationStarted { .. }) => {
                // A failed iteration is part of the history being replayed.
                let _ = session.run_iteration();
            }
            EventBody::Feedback(feedback) => session
                .apply_feedback(feedback.clone())
                .map_err(|e| diverged(produced, e))?,
            EventBody::System(_) => {
                return Err(SessionError::Determinism(format!(
                    "event {produced} ({}) was not regenerated",
                    next.kind()
                )))
            }
        }
        if session.state().event_log.len() == produced {
            return Err(SessionError::Determinism(format!("event {produced} produced no events on replay")));
        }
    }

    let (expected, actual) = (log_hash(events), log_hash(&session.state().event_log));
    if expected != actual {
        return Err(SessionError::Determinism(format!(
            "final-state hash mismatch: log {expected}, replay {actual}"
        )));
    }
    Ok(session.into_state())
}

fn diverged(index: usize, err: SessionError) -> SessionError {
    SessionError::Determinism(format!("event {index} could not be re-applied: {err}"))
}

fn check_kinds(original: &[Event], replayed: &[Event]) -> Result<(), SessionError> {
    if replayed.len() > original.len() {
        return Err(SessionError::Determinism(format!(
            "replay produced {} events, the log has {}",
            replayed.len(),
            original.len()
        )));
    }
    for (a, b) in original.iter().zip(replayed) {
        if a.kind() != b.kind() {
            return Err(SessionError::Determinism(format!(
                "event {}: log has {}, replay produced {}",
                a.event_index,
                a.kind(),
                b.kind()
            )));
        }
    }
    Ok(())
}

/// Replays `state`'s own log and compares the serialized results byte for
/// byte. Returns the shared SHA-256 on success.
pub fn verify_replay(state: &SessionState) -> Result<String, SessionError> {
    let rebuilt = replay(&state.event_log, &state.policy, &state.backends, state.seed)?;
    let (original, replayed) = (state.to_json(), rebuilt.to_json());
    let (expected, actual) = (sha256_hex(original.as_bytes()), sha256_hex(replayed.as_bytes()));
    if expected != actual {
        return Err(SessionError::Determinism(format!(
            "final-state hash mismatch: saved {expected}, replay {actual}"
        )));
    }
    Ok(expected)
}

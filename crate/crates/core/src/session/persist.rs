//! The versioned session file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Event, EventBody, Feedback, IterationRecord, SessionError, SessionPolicy, SessionState, SessionStatus, SystemEvent};
use crate::backends::BackendConfig;
use crate::graph::{ArtifactId, ConstructionGraph};
use crate::utility::{PreferenceRecord, UtilityEstimate};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything about a session that is not the graph, events or iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub problem_statement: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub policy: SessionPolicy,
    /// Named backend configurations. Credentials appear only as the name of
    /// the environment variable holding them.
    pub backends: BTreeMap<String, BackendConfig>,
    pub preference_log: Vec<PreferenceRecord>,
    pub current_spec: Option<ArtifactId>,
    pub current_finalists: Option<(ArtifactId, ArtifactId)>,
    pub accepted: Option<ArtifactId>,
    pub utility_snapshot: Option<UtilityEstimate>,
    pub context_sections: Vec<String>,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub schema_version: u32,
    pub session: SessionHeader,
    pub graph: ConstructionGraph,
    pub events: Vec<Event>,
    pub iterations: Vec<IterationRecord>,
}

impl From<&SessionState> for SessionDocument {
    fn from(state: &SessionState) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session: SessionHeader {
                session_id: state.session_id.clone(),
                problem_statement: state.problem_statement.clone(),
                seed: state.seed,
                status: state.status,
                policy: state.policy.clone(),
                backends: state.backends.clone(),
                preference_log: state.preference_log.clone(),
                current_spec: state.current_spec,
                current_finalists: state.current_finalists,
                accepted: state.accepted,
                utility_snapshot: state.utility_snapshot.clone(),
                context_sections: state.context_sections.clone(),
                last_error: state.last_error.clone(),
            },
            graph: state.graph.clone(),
            events: state.event_log.clone(),
            iterations: state.iterations.clone(),
        }
    }
}

impl From<SessionDocument> for SessionState {
    fn from(doc: SessionDocument) -> Self {
        let h = doc.session;
        SessionState {
            session_id: h.session_id,
            problem_statement: h.problem_statement,
            seed: h.seed,
            status: h.status,
            policy: h.policy,
            backends: h.backends,
            graph: doc.graph,
            preference_log: h.preference_log,
            event_log: doc.events,
            iterations: doc.iterations,
            current_spec: h.current_spec,
            current_finalists: h.current_finalists,
            accepted: h.accepted,
            utility_snapshot: h.utility_snapshot,
            context_sections: h.context_sections,
            last_error: h.last_error,
        }
    }
}

impl SessionState {
    pub fn to_document(&self) -> SessionDocument {
        SessionDocument::from(self)
    }

    /// The canonical serialized form; this is exactly what is saved.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("session state serializes")
    }

    /// Parses and validates a session document.
    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SessionError::Schema(format!("unreadable session file: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(SessionError::Schema(format!(
                    "schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(SessionError::Schema("missing schema_version".into())),
        }
        let doc: SessionDocument =
            serde_json::from_value(value).map_err(|e| SessionError::Schema(format!("malformed session file: {e}")))?;
        let report = doc.graph.validate();
        if !report.is_empty() {
            return Err(SessionError::InvalidFile(report));
        }
        let state = SessionState::from(doc);
        state.check_consistency()?;
        Ok(state)
    }

    /// Every id referenced outside the graph exists in it, and the event log
    /// is numbered 0, 1, 2, ...
    pub fn check_consistency(&self) -> Result<(), SessionError> {
        for (position, event) in self.event_log.iter().enumerate() {
            if event.event_index != position as u64 {
                return Err(SessionError::EventGap {
                    expected: position as u64,
                    found: event.event_index,
                });
            }
        }
        let mut referenced: Vec<ArtifactId> = Vec::new();
        referenced.extend(self.preference_log.iter().flat_map(|r| [r.winner_id, r.loser_id]));
        referenced.extend(self.current_spec);
        referenced.extend(self.current_finalists.iter().flat_map(|(a, b)| [*a, *b]));
        referenced.extend(self.accepted);
        if let Some(estimate) = &self.utility_snapshot {
            referenced.extend(estimate.scores.keys().copied());
        }
        for record in &self.iterations {
            referenced.extend(&record.candidate_ids);
            referenced.extend(record.finalist_program_ids.iter().flat_map(|(a, b)| [*a, *b]));
            if let Some(outcome) = &record.tournament_outcome {
                referenced.extend([outcome.finalists.0, outcome.finalists.1]);
                referenced.extend(outcome.match_log.iter().flat_map(|m| [m.pair.0, m.pair.1, m.winner]));
            }
        }
        for event in &self.event_log {
            referenced.extend(event_references(&event.body));
        }
        match referenced.into_iter().find(|id| !self.graph.contains(*id)) {
            Some(missing) => Err(SessionError::Validation(format!("reference to missing artifact {missing}"))),
            None => Ok(()),
        }
    }
}

fn event_references(body: &EventBody) -> Vec<ArtifactId> {
    match body {
        EventBody::System(event) => match event {
            SystemEvent::SpecificationGenerated { artifact_id, .. } => vec![*artifact_id],
            SystemEvent::RefinementsGenerated { artifact_ids, .. }
            | SystemEvent::ProgramsGenerated { artifact_ids, .. } => artifact_ids.clone(),
            SystemEvent::MatchJudged { pair, winner, .. } => vec![pair.0, pair.1, *winner],
            SystemEvent::TournamentCompleted { finalists, .. } => vec![finalists.0, finalists.1],
            _ => Vec::new(),
        },
        EventBody::Feedback(feedback) => match feedback {
            Feedback::BinaryChoice { chosen, .. } | Feedback::Accept { chosen } => vec![*chosen],
            Feedback::NlCritique { target, .. } => target.iter().copied().collect(),
            Feedback::DirectEdit { target, .. } | Feedback::ExecutionReport { target, .. } => vec![*target],
            Feedback::SpecEdit { .. } | Feedback::Abort { .. } => Vec::new(),
        },
    }
}

/// Writes the session file, replacing any previous version atomically.
pub fn save_session(state: &SessionState, path: &Path) -> Result<(), SessionError> {
    let io = |e: std::io::Error| SessionError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("session")
    ));
    {
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(state.to_json().as_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_session(path: &Path) -> Result<SessionState, SessionError> {
    let text = fs::read_to_string(path).map_err(|e| SessionError::Io(format!("{}: {e}", path.display())))?;
    SessionState::from_json(&text)
}

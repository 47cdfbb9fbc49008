//! The append-only session event log.

use serde::{Deserialize, Serialize};

use crate::backends::content_digest;
use crate::graph::ArtifactId;

/// Events the engine records about its own actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum SystemEvent {
    SessionCreated {
        session_id: String,
        problem_statement: String,
        seed: u64,
    },
    CreationFailed {
        error: String,
    },
    SpecificationGenerated {
        artifact_id: ArtifactId,
        digest: String,
    },
    SpecificationApproved,
    IterationStarted {
        iteration: usize,
        context_digest: String,
    },
    RefinementsGenerated {
        iteration: usize,
        artifact_ids: Vec<ArtifactId>,
        digest: String,
    },
    MatchJudged {
        iteration: usize,
        round: usize,
        pair: (ArtifactId, ArtifactId),
        winner: ArtifactId,
        judge_name: String,
    },
    TournamentCompleted {
        iteration: usize,
        finalists: (ArtifactId, ArtifactId),
        summary_digest: String,
    },
    ProgramsGenerated {
        iteration: usize,
        artifact_ids: Vec<ArtifactId>,
        digest: String,
    },
    UtilitiesFitted {
        records: usize,
        converged: bool,
        iterations_used: usize,
    },
    IterationCompleted {
        iteration: usize,
    },
    IterationFailed {
        iteration: usize,
        error: String,
    },
}

/// Messages the expert can send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum Feedback {
    BinaryChoice {
        chosen: ArtifactId,
        #[serde(default)]
        justification: Option<String>,
    },
    NlCritique {
        text: String,
        #[serde(default)]
        target: Option<ArtifactId>,
    },
    /// `diff` is filled in by the engine when the edit is applied.
    DirectEdit {
        target: ArtifactId,
        content: String,
        #[serde(default)]
        diff: String,
    },
    SpecEdit {
        content: String,
    },
    Accept {
        chosen: ArtifactId,
    },
    Abort {
        #[serde(default)]
        reason: Option<String>,
    },
    ExecutionReport {
        target: ArtifactId,
        ran: bool,
        failed: bool,
        #[serde(default)]
        log_excerpt: String,
    },
}

impl Feedback {
    pub fn kind(&self) -> &'static str {
        match self {
            Feedback::BinaryChoice { .. } => "binary-choice",
            Feedback::NlCritique { .. } => "nl-critique",
            Feedback::DirectEdit { .. } => "direct-edit",
            Feedback::SpecEdit { .. } => "spec-edit",
            Feedback::Accept { .. } => "accept",
            Feedback::Abort { .. } => "abort",
            Feedback::ExecutionReport { .. } => "execution-report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventBody {
    System(SystemEvent),
    Feedback(Feedback),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_index: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// A logged feedback message.
pub type FeedbackEvent = Event;

impl Event {
    pub fn kind(&self) -> String {
        let json = serde_json::to_value(&self.body).expect("events serialize");
        json["kind"].as_str().unwrap_or_default().to_string()
    }

    pub fn is_feedback(&self) -> bool {
        matches!(self.body, EventBody::Feedback(_))
    }

    /// Hex SHA-256 of the serialized payload (empty payloads hash `null`).
    pub fn payload_digest(&self) -> String {
        let json = serde_json::to_value(&self.body).expect("events serialize");
        content_digest(&json["payload"].to_string())
    }

    /// `event_index \t kind \t payload digest`.
    pub fn export_line(&self) -> String {
        format!("{}\t{}\t{}", self.event_index, self.kind(), self.payload_digest())
    }
}

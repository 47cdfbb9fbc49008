//! The co-construction loop and its informational state.
//!
//! A session generates a specification from the problem statement, then
//! repeats: sample refinements, select a finalist pair by tournament, refine
//! the finalists down to the most concrete level, and wait for the expert.
//! Everything that happens is appended to the event log, which is enough to
//! rebuild the state when the backends are deterministic.
//!
//! Status automaton:
//!
//! ```text
//! awaiting-spec-review --spec-edit / approve--> generating
//! generating --run_iteration--> awaiting-human-feedback
//! awaiting-human-feedback --choice / edit / critique / report--> generating
//! any non-terminal --accept--> accepted
//! any non-terminal --abort--> aborted
//! ```

mod context;
pub mod events;
mod persist;
mod replay;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use similar::TextDiff;
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{
    build_generator, build_judge, content_digest, derive_stream, BackendConfig, BackendError, Generator,
    GeneratorRequest, Judge, JudgeRequest, Side, Verdict,
};
use crate::graph::{
    AbstractionLevel, ArtifactDraft, ArtifactId, ConstructionGraph, GraphError, Provenance, ValidationReport,
};
use crate::tournament::{
    run_tournament, summarize_justifications, PairJudge, TournamentError, TournamentOptions, TournamentOutcome,
};
use crate::utility::{fit_utilities, FitConfig, PreferenceRecord, PreferenceSource, UtilityEstimate};

pub use context::build_context;
pub use events::{Event, EventBody, Feedback, FeedbackEvent, SystemEvent};
pub use persist::{load_session, save_session, SessionDocument, SessionHeader, SCHEMA_VERSION};
pub use replay::{replay, verify_replay};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("wrong status: cannot {action} while {status}")]
    WrongStatus { action: String, status: SessionStatus },
    #[error("unknown artifact {0}")]
    UnknownId(ArtifactId),
    #[error("artifact {0} is not a current finalist")]
    NotFinalist(ArtifactId),
    #[error("iteration limit of {0} reached")]
    IterationLimit(usize),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("session file fails validation: {0}")]
    InvalidFile(ValidationReport),
    #[error("io: {0}")]
    Io(String),
    #[error("gap in event indices: expected {expected}, found {found}")]
    EventGap { expected: u64, found: u64 },
    #[error("non-deterministic backend {0} cannot be replayed")]
    NonDeterministic(String),
    #[error("determinism: {0}")]
    Determinism(String),
}

impl SessionError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Validation(_) | SessionError::InvalidFile(_) => "validation",
            SessionError::WrongStatus { .. } | SessionError::IterationLimit(_) => "wrong-status",
            SessionError::UnknownId(_) | SessionError::NotFinalist(_) => "unknown-id",
            SessionError::Backend(_) => "backend-failure",
            SessionError::Schema(_) => "schema",
            SessionError::Io(_) => "io",
            SessionError::EventGap { .. } | SessionError::NonDeterministic(_) | SessionError::Determinism(_) => {
                "determinism"
            }
        }
    }
}

impl From<GraphError> for SessionError {
    fn from(err: GraphError) -> Self {
        match err {
            GraphError::UnknownArtifact(id) | GraphError::UnknownParent(id) => SessionError::UnknownId(id),
            other => SessionError::Validation(other.to_string()),
        }
    }
}

impl From<BackendError> for SessionError {
    fn from(err: BackendError) -> Self {
        SessionError::Backend(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    AwaitingSpecReview,
    Generating,
    AwaitingHumanFeedback,
    Accepted,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Accepted | SessionStatus::Aborted)
    }

    /// Whether the loop automaton permits moving from `self` to `next`.
    /// Staying in `generating` (a critique before the next iteration) counts.
    pub fn allows(self, next: SessionStatus) -> bool {
        use SessionStatus::*;
        match (self, next) {
            (Accepted | Aborted, _) => false,
            (_, Accepted | Aborted) => true,
            (AwaitingSpecReview, Generating) => true,
            (Generating, AwaitingHumanFeedback | Generating) => true,
            (AwaitingHumanFeedback, Generating) => true,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::AwaitingSpecReview => "awaiting-spec-review",
            SessionStatus::Generating => "generating",
            SessionStatus::AwaitingHumanFeedback => "awaiting-human-feedback",
            SessionStatus::Accepted => "accepted",
            SessionStatus::Aborted => "aborted",
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewerMode {
    /// Reviews and possibly edits the specification before refinement.
    Preemptive,
    /// Goes straight to refinement and judges the programs.
    Lazy,
}

/// The fixed strategy that drives a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPolicy {
    pub sample_count: usize,
    pub temperature: f64,
    pub reviewer_mode: ReviewerMode,
    pub judge_backend: String,
    pub generator_backend: String,
    pub human_record_weight: f64,
    pub max_iterations: usize,
    pub levels: Vec<AbstractionLevel>,
    /// Character cap on the context handed to the next generation.
    pub context_budget: usize,
    /// Character cap on each tournament summary.
    pub summary_budget: usize,
    pub regularization: f64,
    /// Concurrent judge calls per tournament round.
    pub parallelism: usize,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        Self {
            sample_count: 16,
            temperature: 1.0,
            reviewer_mode: ReviewerMode::Lazy,
            judge_backend: "mock".into(),
            generator_backend: "mock".into(),
            human_record_weight: 2.0,
            max_iterations: 10,
            levels: AbstractionLevel::default_hierarchy(),
            context_budget: 8_000,
            summary_budget: 4_000,
            regularization: 0.01,
            parallelism: 4,
        }
    }
}

impl SessionPolicy {
    pub fn validate(&self, backends: &BTreeMap<String, BackendConfig>) -> Result<(), SessionError> {
        let fail = |msg: String| Err(SessionError::Validation(msg));
        if self.sample_count < 2 {
            return fail(format!("sample_count must be at least 2, got {}", self.sample_count));
        }
        if self.max_iterations < 1 {
            return fail("max_iterations must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail(format!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        if !(self.human_record_weight.is_finite() && self.human_record_weight > 0.0) {
            return fail("human_record_weight must be positive".into());
        }
        if !(self.regularization.is_finite() && self.regularization > 0.0) {
            return fail("regularization must be positive".into());
        }
        if self.context_budget == 0 || self.summary_budget == 0 {
            return fail("context and summary budgets must be positive".into());
        }
        ConstructionGraph::new(self.levels.clone())?;
        for name in [&self.generator_backend, &self.judge_backend] {
            let config = backends
                .get(name)
                .ok_or_else(|| SessionError::Validation(format!("no backend named {name}")))?;
            config.validate()?;
        }
        Ok(())
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            lambda: self.regularization,
            human_weight: self.human_record_weight,
            ..FitConfig::default()
        }
    }
}

/// Backend registry holding just the built-in deterministic mock.
pub fn mock_backends() -> BTreeMap<String, BackendConfig> {
    [("mock".to_string(), BackendConfig::mock())].into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub status: IterationStatus,
    pub error: Option<String>,
    /// The sampled level-1 refinements.
    pub candidate_ids: Vec<ArtifactId>,
    pub tournament_outcome: Option<TournamentOutcome>,
    /// Most concrete refinements of the two finalists.
    pub finalist_program_ids: Option<(ArtifactId, ArtifactId)>,
    pub human_feedback_indices: Vec<u64>,
    /// Context the refinements of this iteration were conditioned on.
    pub context_summary: String,
}

/// The informational state of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub problem_statement: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub policy: SessionPolicy,
    pub backends: BTreeMap<String, BackendConfig>,
    pub graph: ConstructionGraph,
    pub preference_log: Vec<PreferenceRecord>,
    pub event_log: Vec<Event>,
    pub iterations: Vec<IterationRecord>,
    pub current_spec: Option<ArtifactId>,
    pub current_finalists: Option<(ArtifactId, ArtifactId)>,
    pub accepted: Option<ArtifactId>,
    pub utility_snapshot: Option<UtilityEstimate>,
    /// Feedback and summaries, oldest first, that feed the next generation.
    pub context_sections: Vec<String>,
    pub last_error: Option<String>,
}

impl SessionState {
    pub fn next_event_index(&self) -> u64 {
        self.event_log.len() as u64
    }

    fn log(&mut self, body: EventBody) -> u64 {
        let event_index = self.next_event_index();
        self.event_log.push(Event { event_index, body });
        event_index
    }

    fn log_system(&mut self, event: SystemEvent) -> u64 {
        self.log(EventBody::System(event))
    }

    pub fn completed_iterations(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.status == IterationStatus::Completed)
            .count()
    }

    /// The context the next iteration's refinements will see.
    pub fn next_context(&self) -> String {
        build_context(&self.context_sections, self.policy.context_budget)
    }

    /// Display text of an artifact, without mock bookkeeping.
    pub fn display_content(&self, id: ArtifactId) -> Result<&str, SessionError> {
        Ok(crate::backends::strip_mock_trailer(&self.graph.get(id)?.content))
    }

    fn require(&self, action: &str, allowed: &[SessionStatus]) -> Result<(), SessionError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(SessionError::WrongStatus {
                action: action.to_string(),
                status: self.status,
            })
        }
    }

    fn refit(&mut self) {
        let ids: Vec<ArtifactId> = self
            .preference_log
            .iter()
            .flat_map(|r| [r.winner_id, r.loser_id])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if ids.is_empty() {
            return;
        }
        match fit_utilities(&self.preference_log, &ids, &self.policy.fit_config()) {
            Ok(estimate) => {
                self.log_system(SystemEvent::UtilitiesFitted {
                    records: self.preference_log.len(),
                    converged: estimate.converged,
                    iterations_used: estimate.iterations_used,
                });
                self.utility_snapshot = Some(estimate);
            }
            Err(err) => warn!(%err, "utility refit failed"),
        }
    }

    fn note_feedback(&mut self, event_index: u64) {
        if let Some(last) = self.iterations.last_mut() {
            last.human_feedback_indices.push(event_index);
        }
    }
}

fn stable_session_id(seed: u64, statement: &str) -> String {
    let digest = content_digest(&format!("{seed}:{statement}"));
    format!("s-{}", &digest[..12])
}

/// A session bound to live backend handles.
pub struct Session {
    state: SessionState,
    generator: Arc<dyn Generator>,
    judge: Arc<dyn Judge>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.state.session_id)
            .field("status", &self.state.status)
            .field("generator", &self.generator.name())
            .field("judge", &self.judge.name())
            .finish()
    }
}

/// Adapts a [`Judge`] to tournament ids, keying randomness by event index.
struct ContentJudge<'a> {
    judge: &'a dyn Judge,
    specification: String,
    contents: HashMap<ArtifactId, String>,
    seed: u64,
    first_event_index: u64,
}

impl PairJudge for ContentJudge<'_> {
    fn name(&self) -> String {
        self.judge.name().to_string()
    }

    fn judge(&self, a: ArtifactId, b: ArtifactId, ordinal: usize) -> Result<Verdict, BackendError> {
        let (candidate_a, candidate_b) = (&self.contents[&a], &self.contents[&b]);
        if candidate_a == candidate_b {
            return Ok(Verdict {
                winner: Side::First,
                justification: "The candidates are identical.".into(),
            });
        }
        let request = JudgeRequest {
            specification: self.specification.clone(),
            candidate_a: candidate_a.clone(),
            candidate_b: candidate_b.clone(),
            rubric: None,
        };
        let stream = derive_stream(&[self.seed, self.first_event_index + ordinal as u64]);
        self.judge.judge(&request, stream)
    }
}

impl Session {
    /// Starts a session with backends built from `backends` by the names the
    /// policy gives.
    pub fn create(
        problem_statement: &str,
        policy: SessionPolicy,
        backends: BTreeMap<String, BackendConfig>,
        seed: u64,
        session_id: Option<String>,
    ) -> Result<Self, SessionError> {
        if problem_statement.trim().is_empty() {
            return Err(SessionError::Validation("problem statement is empty".into()));
        }
        policy.validate(&backends)?;
        let generator = build_generator(&policy.generator_backend, &backends[&policy.generator_backend])?;
        let judge = build_judge(&policy.judge_backend, &backends[&policy.judge_backend])?;
        Self::create_with(problem_statement, policy, backends, seed, session_id, generator, judge)
    }

    /// Like [`Session::create`] but with caller-supplied backend handles.
    pub fn create_with(
        problem_statement: &str,
        policy: SessionPolicy,
        backends: BTreeMap<String, BackendConfig>,
        seed: u64,
        session_id: Option<String>,
        generator: Arc<dyn Generator>,
        judge: Arc<dyn Judge>,
    ) -> Result<Self, SessionError> {
        if problem_statement.trim().is_empty() {
            return Err(SessionError::Validation("problem statement is empty".into()));
        }
        let graph = ConstructionGraph::new(policy.levels.clone())?;
        let session_id = session_id.unwrap_or_else(|| stable_session_id(seed, problem_statement));
        let mut state = SessionState {
            session_id: session_id.clone(),
            problem_statement: problem_statement.to_string(),
            seed,
            status: SessionStatus::Generating,
            policy,
            backends,
            graph,
            preference_log: Vec::new(),
            event_log: Vec::new(),
            iterations: Vec::new(),
            current_spec: None,
            current_finalists: None,
            accepted: None,
            utility_snapshot: None,
            context_sections: Vec::new(),
            last_error: None,
        };
        let created = state.log_system(SystemEvent::SessionCreated {
            session_id,
            problem_statement: problem_statement.to_string(),
            seed,
        });

        let request = GeneratorRequest {
            target_level: 0,
            parent_content: problem_statement.to_string(),
            context: String::new(),
            sample_count: 1,
            temperature: state.policy.temperature,
            seed: derive_stream(&[seed, created]),
        };
        let spec = generator.generate(&request).and_then(|mut texts| {
            if texts.len() == 1 {
                Ok(texts.remove(0))
            } else {
                Err(BackendError::Malformed(format!("expected 1 specification, got {}", texts.len())))
            }
        });
        match spec {
            Ok(text) => {
                let draft = ArtifactDraft::new(0, text, None)
                    .created_at(state.next_event_index())
                    .meta("backend", generator.name())
                    .meta("seed", request.seed.to_string())
                    .meta("temperature", request.temperature.to_string());
                let id = state.graph.add_artifact(draft)?;
                let digest = content_digest(&state.graph.get(id)?.content);
                state.log_system(SystemEvent::SpecificationGenerated { artifact_id: id, digest });
                state.current_spec = Some(id);
                state.status = match state.policy.reviewer_mode {
                    ReviewerMode::Preemptive => SessionStatus::AwaitingSpecReview,
                    ReviewerMode::Lazy => SessionStatus::Generating,
                };
            }
            Err(err) => {
                warn!(%err, "specification generation failed");
                state.log_system(SystemEvent::CreationFailed { error: err.to_string() });
                state.last_error = Some(err.to_string());
                state.status = SessionStatus::Aborted;
            }
        }
        Ok(Self { state, generator, judge })
    }

    /// Rebinds a stored state to backends built from its own registry.
    pub fn from_state(state: SessionState) -> Result<Self, SessionError> {
        let find = |name: &str| {
            state
                .backends
                .get(name)
                .ok_or_else(|| SessionError::Validation(format!("no backend named {name}")))
        };
        let generator = build_generator(&state.policy.generator_backend, find(&state.policy.generator_backend)?)?;
        let judge = build_judge(&state.policy.judge_backend, find(&state.policy.judge_backend)?)?;
        Ok(Self { state, generator, judge })
    }

    pub fn with_backends(state: SessionState, generator: Arc<dyn Generator>, judge: Arc<dyn Judge>) -> Self {
        Self { state, generator, judge }
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn into_state(self) -> SessionState {
        self.state
    }

    pub fn is_deterministic(&self) -> bool {
        self.generator.is_deterministic() && self.judge.is_deterministic()
    }

    fn current_spec(&self) -> Result<ArtifactId, SessionError> {
        self.state
            .current_spec
            .ok_or_else(|| SessionError::Validation("session has no specification".into()))
    }

    /// Accepts the generated specification unchanged.
    pub fn approve_specification(&mut self) -> Result<(), SessionError> {
        self.state
            .require("approve the specification", &[SessionStatus::AwaitingSpecReview])?;
        self.state.log_system(SystemEvent::SpecificationApproved);
        self.state.status = SessionStatus::Generating;
        Ok(())
    }

    /// Replaces the specification with an expert-edited version.
    pub fn edit_specification(&mut self, new_content: &str) -> Result<ArtifactId, SessionError> {
        self.apply_feedback(Feedback::SpecEdit {
            content: new_content.to_string(),
        })?;
        self.current_spec()
    }

    /// One pass of sample, select, refine. On backend failure the iteration
    /// is recorded as failed, the status stays `generating`, and the error
    /// is returned.
    pub fn run_iteration(&mut self) -> Result<&IterationRecord, SessionError> {
        self.state.require("run an iteration", &[SessionStatus::Generating])?;
        let limit = self.state.policy.max_iterations;
        if self.state.completed_iterations() >= limit {
            return Err(SessionError::IterationLimit(limit));
        }
        let spec_id = self.current_spec()?;
        let iteration = self.state.iterations.len() + 1;
        let context = self.state.next_context();
        let started = self.state.log_system(SystemEvent::IterationStarted {
            iteration,
            context_digest: content_digest(&context),
        });
        let iteration_seed = derive_stream(&[self.state.seed, started]);
        self.state.iterations.push(IterationRecord {
            index: iteration,
            status: IterationStatus::Failed,
            error: None,
            candidate_ids: Vec::new(),
            tournament_outcome: None,
            finalist_program_ids: None,
            human_feedback_indices: Vec::new(),
            context_summary: context.clone(),
        });
        info!(iteration, session = %self.state.session_id, "iteration started");

        match self.iterate(spec_id, iteration, iteration_seed, &context) {
            Ok(()) => {
                self.state.log_system(SystemEvent::IterationCompleted { iteration });
                self.state.status = SessionStatus::AwaitingHumanFeedback;
                self.state.last_error = None;
                Ok(self.state.iterations.last().expect("record pushed above"))
            }
            Err(err) => {
                let message = err.to_string();
                warn!(iteration, error = %message, "iteration failed");
                let record = self.state.iterations.last_mut().expect("record pushed above");
                record.status = IterationStatus::Failed;
                record.error = Some(message.clone());
                let partial = record.candidate_ids.clone();
                for id in partial {
                    if let Ok(artifact) = self.state.graph.get_mut(id) {
                        artifact.metadata.insert("iteration-status".into(), "failed".into());
                    }
                }
                self.state.log_system(SystemEvent::IterationFailed {
                    iteration,
                    error: message.clone(),
                });
                self.state.last_error = Some(message);
                self.state.status = SessionStatus::Generating;
                Err(err)
            }
        }
    }

    fn iterate(&mut self, spec_id: ArtifactId, iteration: usize, seed: u64, context: &str) -> Result<(), SessionError> {
        let policy = self.state.policy.clone();
        let spec_content = self.state.graph.get(spec_id)?.content.clone();

        // Sample refinements of the specification.
        let request = GeneratorRequest {
            target_level: 1,
            parent_content: spec_content.clone(),
            context: context.to_string(),
            sample_count: policy.sample_count,
            temperature: policy.temperature,
            seed,
        };
        let samples = self.generator.generate(&request)?;
        let mut candidate_ids = Vec::with_capacity(samples.len());
        for (index, text) in samples.iter().enumerate() {
            let draft = ArtifactDraft::new(1, text.clone(), Some(spec_id))
                .created_at(self.state.next_event_index())
                .meta("backend", self.generator.name())
                .meta("iteration", iteration.to_string())
                .meta("sample", index.to_string())
                .meta("seed", seed.to_string())
                .meta("temperature", policy.temperature.to_string());
            match self.state.graph.add_artifact(draft) {
                Ok(id) => candidate_ids.push(id),
                Err(err) => {
                    self.state.iterations.last_mut().expect("open record").candidate_ids = candidate_ids;
                    return Err(SessionError::Backend(format!("unusable refinement {index}: {err}")));
                }
            }
        }
        self.state.iterations.last_mut().expect("open record").candidate_ids = candidate_ids.clone();
        if samples.len() != policy.sample_count {
            return Err(SessionError::Backend(format!(
                "requested {} refinements, received {}",
                policy.sample_count,
                samples.len()
            )));
        }
        self.state.log_system(SystemEvent::RefinementsGenerated {
            iteration,
            artifact_ids: candidate_ids.clone(),
            digest: content_digest(&samples.concat()),
        });

        // Select a finalist pair.
        let judge = ContentJudge {
            judge: self.judge.as_ref(),
            specification: spec_content.clone(),
            contents: candidate_ids
                .iter()
                .map(|id| (*id, self.state.graph.get(*id).map(|a| a.content.clone()).unwrap_or_default()))
                .collect(),
            seed: self.state.seed,
            first_event_index: self.state.next_event_index(),
        };
        let judge_config = self.state.backends.get(&policy.judge_backend);
        let options = TournamentOptions {
            seed,
            parallelism: policy.parallelism,
            retries: 2,
            retry_base: Duration::from_millis(judge_config.map_or(500, |c| c.retry_base_ms)),
        };
        let mut outcome = match run_tournament(&candidate_ids, &judge, &options) {
            Ok(outcome) => outcome,
            Err(TournamentError::JudgeFailed { partial, source, .. }) => {
                self.commit_matches(iteration, &partial);
                return Err(source.into());
            }
            Err(other) => return Err(SessionError::Validation(other.to_string())),
        };
        self.commit_matches(iteration, &outcome.match_log);
        if !outcome.match_log.is_empty() {
            outcome.summary = summarize_justifications(&outcome.match_log, self.generator.as_ref(), policy.summary_budget)
                .map_err(|e| SessionError::Backend(e.to_string()))?;
        }
        self.state.log_system(SystemEvent::TournamentCompleted {
            iteration,
            finalists: outcome.finalists,
            summary_digest: content_digest(&outcome.summary),
        });
        let finalists = outcome.finalists;
        let summary = outcome.summary.clone();
        self.state.iterations.last_mut().expect("open record").tournament_outcome = Some(outcome);

        // Refine both finalists down to the most concrete level.
        let deepest = self.state.graph.max_level();
        let mut leaves = Vec::with_capacity(2);
        for (slot, finalist) in [finalists.0, finalists.1].into_iter().enumerate() {
            let mut current = finalist;
            for level in 2..=deepest {
                let parent = self.state.graph.get(current)?.content.clone();
                let request = GeneratorRequest {
                    target_level: level,
                    parent_content: parent,
                    context: format!("Specification:\n{spec_content}"),
                    sample_count: 1,
                    temperature: policy.temperature,
                    seed: derive_stream(&[seed, level as u64, slot as u64]),
                };
                let mut texts = self.generator.generate(&request)?;
                if texts.len() != 1 {
                    return Err(SessionError::Backend(format!("expected one refinement, got {}", texts.len())));
                }
                let draft = ArtifactDraft::new(level, texts.remove(0), Some(current))
                    .created_at(self.state.next_event_index())
                    .meta("backend", self.generator.name())
                    .meta("iteration", iteration.to_string())
                    .meta("seed", request.seed.to_string())
                    .meta("temperature", policy.temperature.to_string());
                current = self.state.graph.add_artifact(draft)?;
            }
            leaves.push(current);
        }
        let leaf_pair = (leaves[0], leaves[1]);
        let leaf_digest = content_digest(
            &leaves
                .iter()
                .map(|id| self.state.graph.get(*id).map(|a| a.content.as_str()).unwrap_or_default())
                .collect::<String>(),
        );
        self.state.log_system(SystemEvent::ProgramsGenerated {
            iteration,
            artifact_ids: leaves,
            digest: leaf_digest,
        });
        self.state.iterations.last_mut().expect("open record").finalist_program_ids = Some(leaf_pair);
        self.state.current_finalists = Some(leaf_pair);

        self.state.refit();
        let record = self.state.iterations.last_mut().expect("open record");
        record.status = IterationStatus::Completed;
        self.state
            .context_sections
            .push(format!("Tournament summary (iteration {iteration}):\n{summary}"));
        Ok(())
    }

    fn commit_matches(&mut self, iteration: usize, matches: &[crate::tournament::MatchResult]) {
        for m in matches {
            let event_index = self.state.log_system(SystemEvent::MatchJudged {
                iteration,
                round: m.round,
                pair: m.pair,
                winner: m.winner,
                judge_name: m.judge_name.clone(),
            });
            self.state.preference_log.push(PreferenceRecord {
                winner_id: m.winner,
                loser_id: m.loser(),
                source: PreferenceSource::Judge,
                justification: Some(m.justification.clone()),
                event_index,
            });
        }
    }

    /// Applies one expert message. Illegal messages return an error and
    /// leave the state untouched.
    pub fn apply_feedback(&mut self, feedback: Feedback) -> Result<(), SessionError> {
        let state = &self.state;
        let open = [SessionStatus::AwaitingHumanFeedback, SessionStatus::Generating];
        match &feedback {
            Feedback::SpecEdit { content } => {
                state.require("edit the specification", &[SessionStatus::AwaitingSpecReview])?;
                let current = state.graph.get(self.current_spec()?)?;
                if content.trim().is_empty() {
                    return Err(SessionError::Validation("specification cannot be empty".into()));
                }
                if *content == current.content {
                    return Err(SessionError::Validation("edited specification is identical to the current one".into()));
                }
            }
            Feedback::BinaryChoice { chosen, .. } => {
                state.require("choose a finalist", &[SessionStatus::AwaitingHumanFeedback])?;
                state.graph.get(*chosen)?;
                match state.current_finalists {
                    Some((a, b)) if *chosen == a || *chosen == b => {}
                    _ => return Err(SessionError::NotFinalist(*chosen)),
                }
            }
            Feedback::DirectEdit { target, content, .. } => {
                state.require("edit an artifact", &open)?;
                let original = state.graph.get(*target)?;
                if original.level == 0 {
                    return Err(SessionError::Validation("use a spec edit to change the specification".into()));
                }
                if content.trim().is_empty() {
                    return Err(SessionError::Validation("edited content cannot be empty".into()));
                }
                if *content == original.content {
                    return Err(SessionError::Validation("edited content is identical to the original".into()));
                }
            }
            Feedback::NlCritique { text, target } => {
                state.require("submit a critique", &open)?;
                if text.trim().is_empty() {
                    return Err(SessionError::Validation("critique is empty".into()));
                }
                if let Some(target) = target {
                    state.graph.get(*target)?;
                }
            }
            Feedback::ExecutionReport { target, .. } => {
                state.require("report an execution", &open)?;
                state.graph.get(*target)?;
            }
            Feedback::Accept { chosen } => {
                if state.status.is_terminal() {
                    return Err(SessionError::WrongStatus {
                        action: "accept".into(),
                        status: state.status,
                    });
                }
                state.graph.get(*chosen)?;
            }
            Feedback::Abort { .. } => {
                if state.status.is_terminal() {
                    return Err(SessionError::WrongStatus {
                        action: "abort".into(),
                        status: state.status,
                    });
                }
            }
        }
        self.commit_feedback(feedback)
    }

    fn commit_feedback(&mut self, feedback: Feedback) -> Result<(), SessionError> {
        let created_at = self.state.next_event_index();
        match feedback {
            Feedback::SpecEdit { content } => {
                let previous = self.current_spec()?;
                let draft = ArtifactDraft::new(0, content.clone(), None)
                    .provenance(Provenance::HumanEdited)
                    .created_at(created_at)
                    .meta("edited-from", previous.to_string());
                let id = self.state.graph.add_artifact(draft)?;
                self.state.log(EventBody::Feedback(Feedback::SpecEdit { content }));
                self.state.current_spec = Some(id);
                self.state.status = SessionStatus::Generating;
            }
            Feedback::BinaryChoice { chosen, justification } => {
                let (a, b) = self.state.current_finalists.expect("checked before commit");
                let other = if chosen == a { b } else { a };
                let event_index = self.state.log(EventBody::Feedback(Feedback::BinaryChoice {
                    chosen,
                    justification: justification.clone(),
                }));
                let leaf_level = self.state.graph.get(chosen)?.level;
                let winners = self.state.graph.lineage(chosen)?;
                let losers = self.state.graph.lineage(other)?;
                for level in (1..=leaf_level).rev() {
                    let (w, l) = (winners[level], losers[level]);
                    if w != l {
                        self.state.preference_log.push(PreferenceRecord {
                            winner_id: w,
                            loser_id: l,
                            source: PreferenceSource::Human,
                            justification: justification.clone(),
                            event_index,
                        });
                    }
                }
                let mut note = format!("Expert preferred {chosen} over {other}.");
                if let Some(why) = justification.as_deref().filter(|j| !j.trim().is_empty()) {
                    note.push_str(&format!(" Reason: {why}"));
                }
                self.state.context_sections.push(note);
                self.state.note_feedback(event_index);
                self.state.status = SessionStatus::Generating;
                self.state.refit();
            }
            Feedback::DirectEdit { target, content, .. } => {
                let original = self.state.graph.get(target)?.clone();
                let diff = TextDiff::from_lines(&original.content, &content)
                    .unified_diff()
                    .header(&format!("artifact-{target}"), "edited")
                    .to_string();
                let draft = ArtifactDraft::new(original.level, content.clone(), original.parent_id)
                    .provenance(Provenance::HumanEdited)
                    .created_at(created_at)
                    .meta("edited-from", target.to_string());
                let edited = self.state.graph.add_artifact(draft)?;
                let event_index = self.state.log(EventBody::Feedback(Feedback::DirectEdit {
                    target,
                    content,
                    diff: diff.clone(),
                }));
                self.state.preference_log.push(PreferenceRecord {
                    winner_id: edited,
                    loser_id: target,
                    source: PreferenceSource::Human,
                    justification: Some("direct edit".into()),
                    event_index,
                });
                self.state
                    .context_sections
                    .push(format!("Expert edited artifact {target} into {edited}:\n{diff}"));
                self.state.note_feedback(event_index);
                self.state.status = SessionStatus::Generating;
                self.state.refit();
            }
            Feedback::NlCritique { text, target } => {
                let event_index = self.state.log(EventBody::Feedback(Feedback::NlCritique {
                    text: text.clone(),
                    target,
                }));
                let section = match target {
                    Some(id) => format!("Expert critique of {id}:\n{text}"),
                    None => format!("Expert critique:\n{text}"),
                };
                self.state.context_sections.push(section);
                self.state.note_feedback(event_index);
                self.state.status = SessionStatus::Generating;
            }
            Feedback::ExecutionReport {
                target,
                ran,
                failed,
                log_excerpt,
            } => {
                let event_index = self.state.log(EventBody::Feedback(Feedback::ExecutionReport {
                    target,
                    ran,
                    failed,
                    log_excerpt: log_excerpt.clone(),
                }));
                let outcome = match (ran, failed) {
                    (false, _) => "did not run",
                    (true, true) => "ran and failed",
                    (true, false) => "ran successfully",
                };
                self.state
                    .context_sections
                    .push(format!("Execution report for {target}: {outcome}.\n{log_excerpt}"));
                self.state.note_feedback(event_index);
                self.state.status = SessionStatus::Generating;
            }
            Feedback::Accept { chosen } => {
                let event_index = self.state.log(EventBody::Feedback(Feedback::Accept { chosen }));
                self.state.note_feedback(event_index);
                self.state.accepted = Some(chosen);
                self.state.status = SessionStatus::Accepted;
            }
            Feedback::Abort { reason } => {
                let event_index = self.state.log(EventBody::Feedback(Feedback::Abort { reason }));
                self.state.note_feedback(event_index);
                self.state.status = SessionStatus::Aborted;
            }
        }
        Ok(())
    }
}

//! Generator and judge backends.
//!
//! A [`Generator`] realizes the refinement maps between abstraction levels
//! and summarizes review notes; a [`Judge`] returns a pairwise verdict with
//! a justification. Two implementations exist: deterministic seeded mocks
//! for tests and simulation, and an HTTP client for chat-completion
//! endpoints.

mod http;
mod mock;
pub mod template;
mod verdict;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpChatGenerator, HttpChatJudge};
pub use mock::{mock_utility, strip_mock_trailer, with_mock_utility, MockGenerator, MockJudge};
pub use template::{TemplateError, TemplateSet};
pub use verdict::parse_verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub target_level: usize,
    pub parent_content: String,
    pub context: String,
    pub sample_count: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.sample_count == 0 {
            return Err(BackendError::InvalidRequest("sample_count must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub specification: String,
    pub candidate_a: String,
    pub candidate_b: String,
    pub rubric: Option<String>,
}

impl JudgeRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.candidate_a.is_empty() || self.candidate_b.is_empty() {
            return Err(BackendError::InvalidRequest("judge candidates must be nonempty".into()));
        }
        if self.candidate_a == self.candidate_b {
            return Err(BackendError::InvalidRequest("judge candidates must differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub winner: Side,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("empty completion")]
    EmptyCompletion,
    #[error("unparseable verdict: {0}")]
    UnparseableVerdict(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("injected failure: {0}")]
    Injected(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl BackendError {
    /// Failures worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Unreachable(_)
            | BackendError::EmptyCompletion
            | BackendError::UnparseableVerdict(_)
            | BackendError::Malformed(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Produces refinements of a parent artifact and summaries of review notes.
pub trait Generator: Send + Sync {
    fn name(&self) -> &str;

    /// Whether outputs are a pure function of the request.
    fn is_deterministic(&self) -> bool;

    /// Exactly `req.sample_count` texts, or an error.
    fn generate(&self, req: &GeneratorRequest) -> Result<Vec<String>, BackendError>;

    /// Condenses `material` into at most `budget` characters.
    fn summarize(&self, material: &str, budget: usize) -> Result<String, BackendError>;
}

/// Decides which of two candidates is better.
pub trait Judge: Send + Sync {
    fn name(&self) -> &str;

    fn is_deterministic(&self) -> bool;

    /// `stream` keys any randomness the judge uses, so concurrent calls stay
    /// reproducible.
    fn judge(&self, req: &JudgeRequest, stream: u64) -> Result<Verdict, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    HttpChat,
}

/// Knobs that only the mock backends read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    /// Probability the mock judge agrees with the hidden utility order.
    pub noise_p: f64,
    /// Make generation requests for this level fail.
    pub fail_generation_at_level: Option<usize>,
    pub fail_judging: bool,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            noise_p: 1.0,
            fail_generation_at_level: None,
            fail_judging: false,
        }
    }
}

/// Backend description as stored in config and session files. Credentials
/// are read at call time from the environment variable named here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub auth_env_var: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub max_concurrency: usize,
    /// Template name to file path; names absent here use the built-ins.
    pub prompt_templates: BTreeMap<String, String>,
    pub mock: MockSettings,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            auth_env_var: None,
            timeout_ms: 120_000,
            max_retries: 2,
            retry_base_ms: 500,
            max_concurrency: 4,
            prompt_templates: BTreeMap::new(),
            mock: MockSettings::default(),
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn noisy_mock(noise_p: f64) -> Self {
        let mut config = Self::default();
        config.mock.noise_p = noise_p;
        config
    }

    pub fn http_chat(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            ..Self::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint_url.as_deref().unwrap_or("").is_empty() {
                    return Err(BackendError::Config("http-chat requires endpoint_url".into()));
                }
                if self.model_name.as_deref().unwrap_or("").is_empty() {
                    return Err(BackendError::Config("http-chat requires model_name".into()));
                }
            }
            BackendKind::Mock => {
                let p = self.mock.noise_p;
                if !(p > 0.5 && p <= 1.0) {
                    return Err(BackendError::Config(format!(
                        "mock noise_p must lie in (0.5, 1], got {p}"
                    )));
                }
            }
        }
        if self.max_concurrency == 0 {
            return Err(BackendError::Config("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.kind == BackendKind::Mock
    }
}

pub fn build_generator(name: &str, config: &BackendConfig) -> Result<Arc<dyn Generator>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockGenerator::new(name, config.mock.clone())),
        BackendKind::HttpChat => Arc::new(HttpChatGenerator::new(name, config)?),
    })
}

pub fn build_judge(name: &str, config: &BackendConfig) -> Result<Arc<dyn Judge>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockJudge::new(name, config.mock.clone())),
        BackendKind::HttpChat => Arc::new(HttpChatJudge::new(name, config)?),
    })
}

/// Stable 64-bit key from a sequence of integers.
pub fn derive_stream(parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of `text`.
pub fn content_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Caps the number of in-flight calls to one backend.
#[derive(Debug)]
pub(crate) struct RequestGate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct GatePermit<'a> {
    gate: &'a RequestGate,
}

impl RequestGate {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> GatePermit<'_> {
        let mut count = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *count >= self.limit {
            count = self.freed.wait(count).unwrap_or_else(|e| e.into_inner());
        }
        *count += 1;
        GatePermit { gate: self }
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut count = self.gate.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *count -= 1;
        self.gate.freed.notify_one();
    }
}

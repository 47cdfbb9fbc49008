//! Client for OpenAI-style chat-completion endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{
    parse_verdict, BackendConfig, BackendError, Generator, GeneratorRequest, Judge, JudgeRequest,
    RequestGate, TemplateSet, Verdict,
};

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    n: usize,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug)]
struct ChatClient {
    endpoint: String,
    model: String,
    auth_env_var: Option<String>,
    max_retries: u32,
    retry_base: Duration,
    http: reqwest::blocking::Client,
    templates: TemplateSet,
    gate: RequestGate,
}

impl ChatClient {
    fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: config.endpoint_url.clone().unwrap_or_default(),
            model: config.model_name.clone().unwrap_or_default(),
            auth_env_var: config.auth_env_var.clone(),
            max_retries: config.max_retries,
            retry_base: Duration::from_millis(config.retry_base_ms),
            http,
            templates: TemplateSet::load(&config.prompt_templates)?,
            gate: RequestGate::new(config.max_concurrency),
        })
    }

    /// One POST; returns the content of every choice.
    fn complete_once(&self, system: &str, user: &str, temperature: f64, n: usize) -> Result<Vec<String>, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![
                ChatMessage { role: "system", content: system },
                ChatMessage { role: "user", content: user },
            ],
            temperature,
            n,
        };
        let mut request = self.http.post(&self.endpoint).json(&body);
        if let Some(var) = &self.auth_env_var {
            let token = std::env::var(var)
                .map_err(|_| BackendError::Config(format!("credential variable {var} is not set")))?;
            request = request.bearer_auth(token);
        }
        let _permit = self.gate.acquire();
        let response = request.send().map_err(|e| BackendError::Unreachable(e.without_url().to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            let body: String = text.chars().take(200).collect();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: ChatResponse = response.json().map_err(|e| BackendError::Malformed(e.to_string()))?;
        let mut contents = Vec::with_capacity(parsed.choices.len());
        for choice in parsed.choices {
            match choice.message.content {
                Some(text) if !text.trim().is_empty() => contents.push(text),
                _ => return Err(BackendError::EmptyCompletion),
            }
        }
        if contents.is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(contents)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() && attempt < self.max_retries => {
                    let delay = self.retry_base * 2u32.pow(attempt);
                    warn!(%err, attempt, ?delay, "retrying chat completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn complete(&self, system: &str, user: &str, temperature: f64, k: usize) -> Result<Vec<String>, BackendError> {
        let mut samples = Vec::with_capacity(k);
        while samples.len() < k {
            let wanted = k - samples.len();
            let batch = self.with_retries(|| self.complete_once(system, user, temperature, wanted))?;
            debug!(received = batch.len(), wanted, "chat completion batch");
            samples.extend(batch.into_iter().take(wanted));
        }
        Ok(samples)
    }
}

fn role_for_level(level: usize) -> &'static str {
    match level {
        0 => "specification",
        1 => "refinement",
        _ => "code-generation",
    }
}

/// Generator backed by a chat-completion endpoint. Level 0 uses the
/// `specification` templates, level 1 `refinement`, deeper levels
/// `code-generation`.
#[derive(Debug)]
pub struct HttpChatGenerator {
    name: String,
    client: ChatClient,
}

impl HttpChatGenerator {
    pub fn new(name: impl Into<String>, config: &BackendConfig) -> Result<Self, BackendError> {
        Ok(Self {
            name: name.into(),
            client: ChatClient::new(config)?,
        })
    }
}

impl Generator for HttpChatGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn generate(&self, req: &GeneratorRequest) -> Result<Vec<String>, BackendError> {
        req.validate()?;
        let role = role_for_level(req.target_level);
        let vars = [("parent", req.parent_content.as_str()), ("context", req.context.as_str())];
        let system = self.client.templates.render(&format!("{role}.system"), &vars)?;
        let user = self.client.templates.render(&format!("{role}.user"), &vars)?;
        self.client.complete(&system, &user, req.temperature, req.sample_count)
    }

    fn summarize(&self, material: &str, budget: usize) -> Result<String, BackendError> {
        let budget_text = budget.to_string();
        let vars = [("justifications", material), ("budget", budget_text.as_str())];
        let system = self.client.templates.render("summarization.system", &vars)?;
        let user = self.client.templates.render("summarization.user", &vars)?;
        let summary = self.client.complete(&system, &user, 0.0, 1)?.remove(0);
        Ok(summary.chars().take(budget).collect())
    }
}

/// Judge backed by a chat-completion endpoint; the reply must end its
/// decision with `[1]` or `[2]`.
#[derive(Debug)]
pub struct HttpChatJudge {
    name: String,
    client: ChatClient,
}

impl HttpChatJudge {
    pub fn new(name: impl Into<String>, config: &BackendConfig) -> Result<Self, BackendError> {
        Ok(Self {
            name: name.into(),
            client: ChatClient::new(config)?,
        })
    }
}

impl Judge for HttpChatJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn judge(&self, req: &JudgeRequest, _stream: u64) -> Result<Verdict, BackendError> {
        req.validate()?;
        let vars = [
            ("specification", req.specification.as_str()),
            ("candidate_a", req.candidate_a.as_str()),
            ("candidate_b", req.candidate_b.as_str()),
            ("rubric", req.rubric.as_deref().unwrap_or("")),
        ];
        let system = self.client.templates.render("judgment.system", &vars)?;
        let user = self.client.templates.render("judgment.user", &vars)?;
        self.client.with_retries(|| {
            let reply = self.client.complete_once(&system, &user, 0.0, 1)?.remove(0);
            let (winner, justification) = parse_verdict(&reply)?;
            Ok(Verdict { winner, justification })
        })
    }
}

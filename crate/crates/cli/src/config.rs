//! Backend configuration files (TOML).
//!
//! ```toml
//! generator = "live"
//! judge = "live"
//!
//! [backends.live]
//! kind = "http-chat"
//! endpoint_url = "https://api.example.com/v1/chat/completions"
//! model_name = "some-model"
//! auth_env_var = "EXAMPLE_API_KEY"
//! ```
//!
//! Credentials are never written here, only the name of the environment
//! variable that holds them.

use std::collections::BTreeMap;
use std::path::Path;

use coconstruct_core::backends::BackendConfig;
use coconstruct_core::session::mock_backends;
use serde::Deserialize;

use crate::error::ErrorEnvelope;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backends: BTreeMap<String, BackendConfig>,
    /// Backend used for generation in live mode.
    pub generator: Option<String>,
    /// Backend used for judging in live mode.
    pub judge: Option<String>,
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ErrorEnvelope> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ErrorEnvelope::new("io", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ErrorEnvelope> {
        let config: Self =
            toml::from_str(text).map_err(|e| ErrorEnvelope::new("validation", format!("backend config: {e}")))?;
        for (name, backend) in &config.backends {
            backend
                .validate()
                .map_err(|e| ErrorEnvelope::new("validation", format!("backend {name}: {e}")))?;
        }
        Ok(config)
    }

    /// Configured backends plus the built-in `mock`.
    pub fn registry(&self) -> BTreeMap<String, BackendConfig> {
        let mut registry = mock_backends();
        registry.extend(self.backends.clone());
        registry
    }

    /// Generator and judge names for live runs.
    pub fn live_pair(&self) -> Result<(String, String), ErrorEnvelope> {
        let only = (self.backends.len() == 1).then(|| self.backends.keys().next().cloned()).flatten();
        let pick = |explicit: &Option<String>, role: &str| {
            explicit
                .clone()
                .or_else(|| only.clone())
                .ok_or_else(|| ErrorEnvelope::new("validation", format!("backend config must name the {role} backend")))
        };
        let pair = (pick(&self.generator, "generator")?, pick(&self.judge, "judge")?);
        for name in [&pair.0, &pair.1] {
            if !self.registry().contains_key(name) {
                return Err(ErrorEnvelope::new("validation", format!("no backend named {name}")));
            }
        }
        Ok(pair)
    }
}

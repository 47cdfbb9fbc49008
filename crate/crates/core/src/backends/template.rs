//! Prompt templates with `{placeholder}` substitution.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {template}: no value for placeholder {{{placeholder}}}")]
    MissingValue { template: String, placeholder: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("cannot read template {name} from {path}: {reason}")]
    Unreadable {
        name: String,
        path: String,
        reason: String,
    },
}

const DEFAULTS: &[(&str, &str)] = &[
    ("specification.system", include_str!("../../templates/specification.system.txt")),
    ("specification.user", include_str!("../../templates/specification.user.txt")),
    ("refinement.system", include_str!("../../templates/refinement.system.txt")),
    ("refinement.user", include_str!("../../templates/refinement.user.txt")),
    ("code-generation.system", include_str!("../../templates/code-generation.system.txt")),
    ("code-generation.user", include_str!("../../templates/code-generation.user.txt")),
    ("judgment.system", include_str!("../../templates/judgment.system.txt")),
    ("judgment.user", include_str!("../../templates/judgment.user.txt")),
    ("summarization.system", include_str!("../../templates/summarization.system.txt")),
    ("summarization.user", include_str!("../../templates/summarization.user.txt")),
];

/// Loaded template texts keyed by name (`<role>.system` / `<role>.user`).
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            texts: DEFAULTS
                .iter()
                .map(|(name, text)| (name.to_string(), text.to_string()))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Built-in defaults overridden by files named in `overrides`.
    pub fn load(overrides: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for (name, path) in overrides {
            let text = std::fs::read_to_string(Path::new(path)).map_err(|e| TemplateError::Unreadable {
                name: name.clone(),
                path: path.clone(),
                reason: e.to_string(),
            })?;
            set.texts.insert(name.clone(), text);
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.texts.insert(name.into(), text.into());
    }

    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let text = self
            .texts
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))?;
        render(name, text, values)
    }
}

fn is_placeholder_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Replaces every `{name}` in `template` (name: `[a-z0-9_]+`) with its value.
/// Other braces are copied through, and substituted values are not rescanned.
pub fn render(name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after.find(|c: char| !is_placeholder_char(c)).unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let ident = &after[..ident_len];
            let value = values
                .iter()
                .find(|(key, _)| *key == ident)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: name.to_string(),
                    placeholder: ident.to_string(),
                })?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

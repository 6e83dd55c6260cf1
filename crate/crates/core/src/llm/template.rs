//! Prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    PersonaExtraction,
    UnstructuredExtraction,
    FewShotChat,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::PersonaExtraction => "persona_extraction",
            TemplateName::UnstructuredExtraction => "unstructured_extraction",
            TemplateName::FewShotChat => "few_shot_chat",
        }
    }

    /// Placeholders the template must carry.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::PersonaExtraction => &["dimensions", "context", "response"],
            TemplateName::UnstructuredExtraction => &["context", "response"],
            TemplateName::FewShotChat => &["examples", "context"],
        }
    }

    /// System message sent alongside the rendered body.
    pub fn system_prompt(self) -> &'static str {
        match self {
            TemplateName::PersonaExtraction => {
                "You annotate persona features of chat characters. You answer with JSON only."
            }
            TemplateName::UnstructuredExtraction => {
                "You analyze why chat characters say what they say."
            }
            TemplateName::FewShotChat => "You are a human-like chat companion.",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::PersonaExtraction => {
                include_str!("../../assets/prompts/persona_extraction.v1.txt")
            }
            TemplateName::UnstructuredExtraction => {
                include_str!("../../assets/prompts/unstructured_extraction.v1.txt")
            }
            TemplateName::FewShotChat => include_str!("../../assets/prompts/few_shot_chat.v1.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        PromptTemplate {
            name,
            body: name.builtin_body().to_string(),
        }
    }

    /// A custom body; every placeholder the template kind requires must appear in it.
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, LlmError> {
        let t = PromptTemplate {
            name,
            body: body.into(),
        };
        let found = t.placeholders_in_body();
        for p in name.placeholders() {
            if !found.iter().any(|f| f == p) {
                return Err(LlmError::Template(p.to_string()));
            }
        }
        Ok(t)
    }

    pub fn placeholders_in_body(&self) -> Vec<String> {
        let mut out: Vec<String> = placeholder_re()
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Single-pass substitution; bound text is never rescanned.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, LlmError> {
        for name in self.placeholders_in_body() {
            if !bindings.contains_key(name.as_str()) {
                return Err(LlmError::Template(name));
            }
        }
        Ok(placeholder_re()
            .replace_all(&self.body, |caps: &regex::Captures| {
                bindings[&caps[1]].clone()
            })
            .into_owned())
    }
}

//! Deterministic rule-based backend for offline runs and tests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::template::TemplateName;
use super::transport::{Transport, TransportFailure, WireRequest};
use crate::schema::default_schema;

/// When `marker` occurs in the transcript (case-insensitive), the extractor
/// reports `value` for `dimension`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerRule {
    pub marker: String,
    pub dimension: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub rules: Vec<MarkerRule>,
    /// Keys emitted in extraction replies; unmatched keys get "none".
    #[serde(default = "default_dimensions")]
    pub dimensions: Vec<String>,
    #[serde(default)]
    pub unstructured_reply: Option<String>,
    #[serde(default)]
    pub chat_reply: Option<String>,
}

fn default_dimensions() -> Vec<String> {
    default_schema().keys().map(str::to_string).collect()
}

impl Default for MockRules {
    fn default() -> Self {
        MockRules {
            rules: Vec::new(),
            dimensions: default_dimensions(),
            unstructured_reply: None,
            chat_reply: None,
        }
    }
}

impl MockRules {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn with_rule(mut self, marker: &str, dimension: &str, value: &str) -> Self {
        self.rules.push(MarkerRule {
            marker: marker.into(),
            dimension: dimension.into(),
            value: value.into(),
        });
        self
    }
}

fn tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].find(&close)?;
    Some(&text[start..end])
}

/// The transcript part of a rendered prompt: the tagged dialogue and response
/// when present, otherwise all user text.
fn transcript(request: &WireRequest) -> String {
    let user: Vec<&str> = request
        .messages
        .iter()
        .filter(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .collect();
    let first = user.first().copied().unwrap_or_default();
    match (tagged(first, "dialogue"), tagged(first, "response")) {
        (None, None) => user.join("\n"),
        (d, r) => format!("{}\n{}", d.unwrap_or_default(), r.unwrap_or_default()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    rules: MockRules,
}

impl MockTransport {
    pub fn new(rules: MockRules) -> Self {
        MockTransport { rules }
    }

    fn matches<'a>(&'a self, text: &str) -> Vec<&'a MarkerRule> {
        let hay = text.to_lowercase();
        self.rules
            .rules
            .iter()
            .filter(|r| !r.marker.is_empty() && hay.contains(&r.marker.to_lowercase()))
            .collect()
    }

    pub fn reply(&self, request: &WireRequest) -> String {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let text = transcript(request);
        let hits = self.matches(&text);
        if system == TemplateName::PersonaExtraction.system_prompt() {
            let mut obj = Map::new();
            for dim in &self.rules.dimensions {
                let value = hits
                    .iter()
                    .find(|r| &r.dimension == dim)
                    .map_or("none", |r| r.value.as_str());
                obj.insert(dim.clone(), Value::String(value.to_string()));
            }
            Value::Object(obj).to_string()
        } else if system == TemplateName::UnstructuredExtraction.system_prompt() {
            self.rules.unstructured_reply.clone().unwrap_or_else(|| {
                let traits: Vec<String> = hits
                    .iter()
                    .map(|r| format!("{} ({})", r.value, r.dimension))
                    .collect();
                format!(
                    "The response continues the preceding turns. Distinctive traits: {}.",
                    if traits.is_empty() {
                        "none evident".to_string()
                    } else {
                        traits.join(", ")
                    }
                )
            })
        } else {
            self.rules
                .chat_reply
                .clone()
                .unwrap_or_else(|| "ok".to_string())
        }
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &WireRequest) -> Result<String, TransportFailure> {
        Ok(self.reply(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::transport::WireMessage;

    fn req(system: &str, user: &str) -> WireRequest {
        WireRequest {
            model: "mock".into(),
            messages: vec![
                WireMessage {
                    role: "system".into(),
                    content: system.into(),
                },
                WireMessage {
                    role: "user".into(),
                    content: user.into(),
                },
            ],
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    #[test]
    fn extraction_reply_lists_every_dimension() {
        let m =
            MockTransport::new(MockRules::default().with_rule("darling", "nickname", "darling"));
        let reply = m.reply(&req(
            TemplateName::PersonaExtraction.system_prompt(),
            "e.g. swimming <dialogue>\nUser: hi\n</dialogue> <response>\nhey Darling\n</response>",
        ));
        let v: Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v["nickname"], "darling");
        assert_eq!(v["hobby"], "none");
        assert_eq!(v.as_object().unwrap().len(), 9);
    }

    #[test]
    fn markers_outside_transcript_are_ignored() {
        let m = MockTransport::new(MockRules::default().with_rule("swimming", "hobby", "swimming"));
        let reply = m.reply(&req(
            TemplateName::PersonaExtraction.system_prompt(),
            "hobby, e.g. swimming\n<dialogue>\nUser: hi\n</dialogue>\n<response>\nhello\n</response>",
        ));
        let v: Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v["hobby"], "none");
    }

    #[test]
    fn pure_function_of_request() {
        let m = MockTransport::new(MockRules {
            unstructured_reply: Some("canned".into()),
            ..MockRules::default()
        });
        let r = req(TemplateName::UnstructuredExtraction.system_prompt(), "x");
        assert_eq!(m.reply(&r), "canned");
        assert_eq!(m.reply(&r), m.reply(&r));
        assert_eq!(m.reply(&req("other", "x")), "ok");
    }
}

//! LLM-backed persona extraction and the per-dimension posterior it defines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ExtractionError, PriorError};
use crate::ingest::{ContextTargetPair, Speaker, Turn};
use crate::llm::{ChatMessage, ChatRequest, LlmClient, PromptTemplate, TemplateName};
use crate::prior::Prior;
use crate::schema::{canonicalize, PersonaAssignment, PersonaSchema, PersonaValue, Provenance};

pub const EXTRACTION_MAX_TOKENS: u32 = 512;
pub const ANALYSIS_MAX_TOKENS: u32 = 768;

const REPAIR_INSTRUCTION: &str =
    "That was not a single valid JSON object. Reply again with only the JSON object, using exactly these keys:";

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub assignment: PersonaAssignment,
    pub raw_reply: String,
    pub extractor_model: String,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    session_id: String,
    turn_index: usize,
    assignment: Value,
    raw_reply: String,
    extractor_model: String,
}

impl ExtractionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RecordLine {
            session_id: self.session_id.clone(),
            turn_index: self.turn_index,
            assignment: self.assignment.to_json(),
            raw_reply: self.raw_reply.clone(),
            extractor_model: self.extractor_model.clone(),
        })
        .expect("record serializes")
    }

    pub fn from_json_line(line: &str, schema: &PersonaSchema) -> Result<Self, ExtractionError> {
        let raw: RecordLine =
            serde_json::from_str(line).map_err(|e| ExtractionError::Input(e.to_string()))?;
        Ok(ExtractionRecord {
            session_id: raw.session_id,
            turn_index: raw.turn_index,
            assignment: PersonaAssignment::from_json(schema, &raw.assignment)?,
            raw_reply: raw.raw_reply,
            extractor_model: raw.extractor_model,
        })
    }
}

pub fn write_records(path: &Path, records: &[ExtractionRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn read_records(
    path: &Path,
    schema: &PersonaSchema,
) -> Result<Vec<ExtractionRecord>, ExtractionError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExtractionError::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ExtractionRecord::from_json_line(l, schema).map_err(|e| {
                ExtractionError::Input(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Free-text persona analysis kept verbatim for the unstructured corpus variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub analysis: String,
    pub extractor_model: String,
}

pub fn render_transcript(context: &[Turn]) -> String {
    context
        .iter()
        .map(|t| match t.role {
            Speaker::User => format!("User: {}", t.text),
            Speaker::Ai => format!("AI: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_dimension_list(schema: &PersonaSchema) -> String {
    schema
        .dimensions
        .iter()
        .map(|d| match &d.closed_values {
            Some(values) => format!(
                "- {}: {} (one of: {})",
                d.key,
                d.description,
                values.join(", ")
            ),
            None => format!("- {}: {}", d.key, d.description),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Locates the outermost JSON object in a reply, tolerating code fences and
/// surrounding prose.
pub fn parse_reply_object(reply: &str) -> Result<Map<String, Value>, String> {
    let start = reply.find('{').ok_or("no '{' in reply")?;
    let end = reply.rfind('}').ok_or("no '}' in reply")?;
    if end < start {
        return Err("unbalanced braces".into());
    }
    match serde_json::from_str::<Value>(&reply[start..=end]) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("reply is not a JSON object".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Maps a parsed reply onto the schema. Missing, non-scalar, null-token and
/// out-of-set fields become absent.
pub fn assignment_from_reply(
    schema: &PersonaSchema,
    fields: &Map<String, Value>,
) -> PersonaAssignment {
    let mut out = PersonaAssignment::empty(schema);
    for dim in &schema.dimensions {
        let raw = match fields.get(&dim.key) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::Bool(b)) => b.to_string(),
            _ => continue,
        };
        match canonicalize(dim, &raw) {
            Ok(Some(v)) => out
                .set(&dim.key, v, Provenance::Extracted)
                .expect("schema key"),
            Ok(None) => {}
            Err(e) => log::debug!("dropping field: {e}"),
        }
    }
    out
}

pub struct Extractor<'a> {
    client: &'a LlmClient,
    schema: &'a PersonaSchema,
    structured: PromptTemplate,
    unstructured: PromptTemplate,
}

impl<'a> Extractor<'a> {
    pub fn new(client: &'a LlmClient, schema: &'a PersonaSchema) -> Self {
        Extractor {
            client,
            schema,
            structured: PromptTemplate::builtin(TemplateName::PersonaExtraction),
            unstructured: PromptTemplate::builtin(TemplateName::UnstructuredExtraction),
        }
    }

    pub fn with_templates(
        mut self,
        structured: PromptTemplate,
        unstructured: PromptTemplate,
    ) -> Self {
        self.structured = structured;
        self.unstructured = unstructured;
        self
    }

    fn check_input(context: &[Turn], response: &str) -> Result<(), ExtractionError> {
        if context.is_empty() {
            return Err(ExtractionError::Input("empty context".into()));
        }
        if response.trim().is_empty() {
            return Err(ExtractionError::Input("empty response".into()));
        }
        Ok(())
    }

    fn request(system: &str, messages: Vec<ChatMessage>, max_tokens: u32) -> ChatRequest {
        ChatRequest {
            system: system.to_string(),
            messages,
            temperature: 0.0,
            max_tokens,
        }
    }

    /// One prompt for all dimensions, with a single repair round when the
    /// reply is not a JSON object.
    pub fn extract(
        &self,
        session_id: &str,
        turn_index: usize,
        context: &[Turn],
        response: &str,
    ) -> Result<ExtractionRecord, ExtractionError> {
        Self::check_input(context, response)?;
        let bindings = BTreeMap::from([
            ("dimensions", render_dimension_list(self.schema)),
            ("context", render_transcript(context)),
            ("response", response.to_string()),
        ]);
        let prompt = self.structured.render(&bindings)?;
        let system = TemplateName::PersonaExtraction.system_prompt();
        let first = self.client.complete(&Self::request(
            system,
            vec![ChatMessage::user(prompt.clone())],
            EXTRACTION_MAX_TOKENS,
        ))?;
        let (fields, raw_reply) = match parse_reply_object(&first) {
            Ok(fields) => (fields, first),
            Err(reason) => {
                log::debug!("{session_id}#{turn_index}: unparseable reply ({reason}); repairing");
                let keys: Vec<&str> = self.schema.keys().collect();
                let repair = Self::request(
                    system,
                    vec![
                        ChatMessage::user(prompt),
                        ChatMessage::assistant(first),
                        ChatMessage::user(format!("{REPAIR_INSTRUCTION} {}", keys.join(", "))),
                    ],
                    EXTRACTION_MAX_TOKENS,
                );
                let second = self.client.complete(&repair)?;
                match parse_reply_object(&second) {
                    Ok(fields) => (fields, second),
                    Err(reason) => {
                        return Err(ExtractionError::Unparseable {
                            reason,
                            raw_reply: second,
                        })
                    }
                }
            }
        };
        Ok(ExtractionRecord {
            session_id: session_id.to_string(),
            turn_index,
            assignment: assignment_from_reply(self.schema, &fields),
            raw_reply,
            extractor_model: self.client.model().to_string(),
        })
    }

    pub fn extract_pair(
        &self,
        pair: &ContextTargetPair,
    ) -> Result<ExtractionRecord, ExtractionError> {
        self.extract(
            &pair.session_id,
            pair.target_index,
            &pair.context,
            &pair.target.text,
        )
    }

    pub fn extract_unstructured(
        &self,
        context: &[Turn],
        response: &str,
    ) -> Result<String, ExtractionError> {
        Self::check_input(context, response)?;
        let bindings = BTreeMap::from([
            ("context", render_transcript(context)),
            ("response", response.to_string()),
        ]);
        let prompt = self.unstructured.render(&bindings)?;
        let reply = self.client.complete(&Self::request(
            TemplateName::UnstructuredExtraction.system_prompt(),
            vec![ChatMessage::user(prompt)],
            ANALYSIS_MAX_TOKENS,
        ))?;
        if reply.trim().is_empty() {
            return Err(ExtractionError::EmptyReply);
        }
        Ok(reply)
    }

    pub fn analyze_pair(
        &self,
        pair: &ContextTargetPair,
    ) -> Result<AnalysisRecord, ExtractionError> {
        Ok(AnalysisRecord {
            session_id: pair.session_id.clone(),
            turn_index: pair.target_index,
            analysis: self.extract_unstructured(&pair.context, &pair.target.text)?,
            extractor_model: self.client.model().to_string(),
        })
    }
}

/// q(z_k = candidate | x, c): 1 on the extracted value, 0 on any other value,
/// and the prior mass when the dimension was not extracted.
pub fn posterior_mass(
    schema: &PersonaSchema,
    dim_key: &str,
    candidate: &str,
    assignment: &PersonaAssignment,
    prior: &Prior,
) -> Result<f64, ExtractionError> {
    let dim = schema
        .dimension(dim_key)
        .ok_or_else(|| ExtractionError::InvalidValue(format!("unknown dimension {dim_key:?}")))?;
    let candidate = PersonaValue::from_canonical(dim, candidate)
        .map_err(|e| ExtractionError::InvalidValue(e.to_string()))?;
    let dim_prior = prior
        .dimension(dim_key)
        .ok_or_else(|| PriorError::MissingDimension(dim_key.to_string()))?;
    match assignment.provenance(dim_key) {
        Some(Provenance::Extracted) | Some(Provenance::Sampled) => {
            let observed = assignment.get(dim_key).expect("present value");
            Ok(if *observed == candidate { 1.0 } else { 0.0 })
        }
        Some(Provenance::Absent) => Ok(dim_prior.probability(&candidate)),
        None => Err(ExtractionError::InvalidValue(format!(
            "assignment lacks {dim_key:?}"
        ))),
    }
}

/// Product of per-dimension masses over a full candidate point.
pub fn joint_posterior_mass(
    schema: &PersonaSchema,
    candidate: &[(&str, &str)],
    assignment: &PersonaAssignment,
    prior: &Prior,
) -> Result<f64, ExtractionError> {
    candidate.iter().try_fold(1.0, |acc, (k, v)| {
        Ok(acc * posterior_mass(schema, k, v, assignment, prior)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{
        BackendConfig, MockRules, MockTransport, Transport, TransportFailure, WireRequest,
    };
    use crate::prior::build_prior;
    use crate::schema::default_schema;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn turns(texts: &[(&str, &str)]) -> Vec<Turn> {
        texts
            .iter()
            .enumerate()
            .map(|(index, (r, t))| Turn {
                role: if *r == "u" {
                    Speaker::User
                } else {
                    Speaker::Ai
                },
                text: t.to_string(),
                index,
            })
            .collect()
    }

    fn mock_client(rules: MockRules, cache: Option<&Path>) -> LlmClient {
        let cfg = BackendConfig {
            cache_dir: cache.map(Path::to_path_buf),
            ..BackendConfig::default()
        };
        LlmClient::with_transport(cfg, Arc::new(MockTransport::new(rules))).unwrap()
    }

    /// Replies from a fixed script, one entry per call.
    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl Transport for Scripted {
        fn send(&self, _: &WireRequest) -> Result<String, TransportFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[n.min(self.replies.len() - 1)].to_string())
        }
    }

    fn scripted(replies: Vec<&'static str>) -> (LlmClient, Arc<Scripted>) {
        let t = Arc::new(Scripted {
            replies,
            calls: AtomicUsize::new(0),
        });
        (
            LlmClient::with_transport(BackendConfig::default(), t.clone()).unwrap(),
            t,
        )
    }

    #[test]
    fn mock_rule_yields_extracted_nickname() {
        let schema = default_schema();
        let client = mock_client(
            MockRules::default().with_rule("darling", "nickname", "darling"),
            None,
        );
        let ex = Extractor::new(&client, &schema);
        let rec = ex
            .extract(
                "s1",
                1,
                &turns(&[("u", "what's for lunch?")]),
                "Pasta, darling!",
            )
            .unwrap();
        assert_eq!(rec.assignment.get("nickname").unwrap().as_str(), "darling");
        assert_eq!(
            rec.assignment.provenance("nickname"),
            Some(Provenance::Extracted)
        );
        assert_eq!(rec.assignment.provenance("hobby"), Some(Provenance::Absent));
        assert_eq!(rec.extractor_model, "mock");
        rec.assignment.validate(&schema).unwrap();
    }

    #[test]
    fn none_tokens_become_absent() {
        let schema = default_schema();
        let (client, _) = scripted(vec![
            r#"{"tone":"none","hobby":" Swimming ","relationship":"boss"}"#,
        ]);
        let rec = Extractor::new(&client, &schema)
            .extract("s", 1, &turns(&[("u", "hi")]), "hello")
            .unwrap();
        assert_eq!(rec.assignment.provenance("tone"), Some(Provenance::Absent));
        assert_eq!(rec.assignment.get("hobby").unwrap().as_str(), "swimming");
        // out-of-set relationship is dropped rather than failing the record
        assert_eq!(
            rec.assignment.provenance("relationship"),
            Some(Provenance::Absent)
        );
    }

    #[test]
    fn fenced_reply_parses() {
        let m = parse_reply_object("Sure!\n```json\n{\"tone\": \"warm\"}\n```").unwrap();
        assert_eq!(m["tone"], "warm");
        assert!(parse_reply_object("no json here").is_err());
        assert!(parse_reply_object("[1, 2]").is_err());
    }

    #[test]
    fn one_repair_round_then_error() {
        let schema = default_schema();
        let (client, t) = scripted(vec!["oops", r#"{"tone":"calm"}"#]);
        let rec = Extractor::new(&client, &schema)
            .extract("s", 1, &turns(&[("u", "hi")]), "hello")
            .unwrap();
        assert_eq!(rec.assignment.get("tone").unwrap().as_str(), "calm");
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);

        let (client, t) = scripted(vec!["oops", "still not json", "{}"]);
        let err = Extractor::new(&client, &schema)
            .extract("s", 1, &turns(&[("u", "hi")]), "hello")
            .unwrap_err();
        match err {
            ExtractionError::Unparseable { raw_reply, .. } => {
                assert_eq!(raw_reply, "still not json")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_inputs_rejected() {
        let schema = default_schema();
        let client = mock_client(MockRules::default(), None);
        let ex = Extractor::new(&client, &schema);
        assert!(matches!(
            ex.extract("s", 1, &[], "x"),
            Err(ExtractionError::Input(_))
        ));
        assert!(matches!(
            ex.extract("s", 1, &turns(&[("u", "a")]), "  "),
            Err(ExtractionError::Input(_))
        ));
    }

    #[test]
    fn unstructured_analysis_is_verbatim_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let schema = default_schema();
        let canned = "  Because the user asked twice.\nThe AI is playful. ";
        let client = mock_client(
            MockRules {
                unstructured_reply: Some(canned.into()),
                ..MockRules::default()
            },
            Some(dir.path()),
        );
        let ex = Extractor::new(&client, &schema);
        let ctx = turns(&[("u", "hi")]);
        let a = ex.extract_unstructured(&ctx, "hey").unwrap();
        assert_eq!(a, canned);
        assert_eq!(ex.extract_unstructured(&ctx, "hey").unwrap(), a);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn empty_analysis_is_an_error() {
        let schema = default_schema();
        let (client, _) = scripted(vec!["   "]);
        let err = Extractor::new(&client, &schema)
            .extract_unstructured(&turns(&[("u", "hi")]), "hey")
            .unwrap_err();
        assert!(matches!(err, ExtractionError::EmptyReply));
    }

    #[test]
    fn record_line_round_trip() {
        let schema = default_schema();
        let client = mock_client(
            MockRules::default().with_rule("pasta", "topic", "lunch"),
            None,
        );
        let rec = Extractor::new(&client, &schema)
            .extract("s9", 3, &turns(&[("u", "lunch?")]), "pasta!")
            .unwrap();
        let line = rec.to_json_line();
        assert!(line.starts_with("{\"session_id\":\"s9\",\"turn_index\":3,\"assignment\":"));
        assert_eq!(
            ExtractionRecord::from_json_line(&line, &schema).unwrap(),
            rec
        );
    }

    fn relationship_record(schema: &PersonaSchema, value: Option<&str>) -> ExtractionRecord {
        let mut a = PersonaAssignment::empty(schema);
        if let Some(v) = value {
            let d = schema.dimension("relationship").unwrap();
            a.set(
                "relationship",
                PersonaValue::from_canonical(d, v).unwrap(),
                Provenance::Extracted,
            )
            .unwrap();
        }
        ExtractionRecord {
            session_id: "s".into(),
            turn_index: 1,
            assignment: a,
            raw_reply: String::new(),
            extractor_model: "m".into(),
        }
    }

    #[test]
    fn posterior_three_cases() {
        let schema = default_schema();
        let corpus: Vec<_> = ["friend", "friend", "lover"]
            .iter()
            .map(|v| relationship_record(&schema, Some(v)))
            .collect();
        let prior = build_prior(&corpus, &schema, "hand").unwrap();
        let friend = relationship_record(&schema, Some("friend"));
        assert_eq!(
            posterior_mass(
                &schema,
                "relationship",
                "friend",
                &friend.assignment,
                &prior
            )
            .unwrap(),
            1.0
        );
        assert_eq!(
            posterior_mass(&schema, "relationship", "lover", &friend.assignment, &prior).unwrap(),
            0.0
        );
        let absent = relationship_record(&schema, None);
        let p = posterior_mass(
            &schema,
            "relationship",
            "friend",
            &absent.assignment,
            &prior,
        )
        .unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            posterior_mass(
                &schema,
                "relationship",
                "Friend",
                &absent.assignment,
                &prior
            ),
            Err(ExtractionError::InvalidValue(_))
        ));
    }
}

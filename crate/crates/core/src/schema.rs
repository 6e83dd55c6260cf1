//! The structured latent persona space: three axes of named discrete
//! sub-dimensions, canonical value text, and per-dialogue assignments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::SchemaError;

pub const SCHEMA_VERSION: u32 = 1;

/// Tokens an extractor may emit to signal "no evidence for this dimension".
pub const NULL_TOKENS: &[&str] = &["", "none", "null", "∅", "n/a"];

/// Default membership of the relationship dimension.
pub const RELATIONSHIP_VALUES: &[&str] = &["stranger", "acquaintance", "friend", "lover", "enemy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Talking,
    Interaction,
    Personal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Talking, Axis::Interaction, Axis::Personal];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Talking => "talking",
            Axis::Interaction => "interaction",
            Axis::Personal => "personal",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Axis {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "talking" => Ok(Axis::Talking),
            "interaction" => Ok(Axis::Interaction),
            "personal" => Ok(Axis::Personal),
            other => Err(SchemaError::UnknownAxis(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    FreeText,
    ClosedSet,
}

/// How raw text is folded into a canonical value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextForm {
    /// Lowercased, whitespace-collapsed.
    #[default]
    Plain,
    /// Case preserved; variation selectors and skin-tone modifiers removed.
    Emoji,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub key: String,
    pub axis: Axis,
    pub description: String,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_values: Option<Vec<String>>,
    #[serde(default)]
    pub text_form: TextForm,
}

impl DimensionSpec {
    fn free(key: &str, axis: Axis, description: &str) -> Self {
        DimensionSpec {
            key: key.to_string(),
            axis,
            description: description.to_string(),
            value_kind: ValueKind::FreeText,
            closed_values: None,
            text_form: TextForm::Plain,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.value_kind == ValueKind::ClosedSet
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSchema {
    pub schema_version: u32,
    pub dimensions: Vec<DimensionSpec>,
}

/// The nine-dimension schema: talking {catchphrase, frequent_emoji, tone},
/// interaction {nickname, relationship, vibe, topic}, personal {personality, hobby}.
pub fn default_schema() -> PersonaSchema {
    let mut emoji = DimensionSpec::free(
        "frequent_emoji",
        Axis::Talking,
        "an emoji the speaker uses habitually",
    );
    emoji.text_form = TextForm::Emoji;
    let relationship = DimensionSpec {
        key: "relationship".to_string(),
        axis: Axis::Interaction,
        description: "relationship proximity between the speaker and the user".to_string(),
        value_kind: ValueKind::ClosedSet,
        closed_values: Some(RELATIONSHIP_VALUES.iter().map(|v| v.to_string()).collect()),
        text_form: TextForm::Plain,
    };
    PersonaSchema {
        schema_version: SCHEMA_VERSION,
        dimensions: vec![
            DimensionSpec::free(
                "catchphrase",
                Axis::Talking,
                "a recurrent phrase or interjection, e.g. \"oh my god\"",
            ),
            emoji,
            DimensionSpec::free(
                "tone",
                Axis::Talking,
                "tonal register, e.g. patient, tender, irritable",
            ),
            DimensionSpec::free(
                "nickname",
                Axis::Interaction,
                "how the speaker addresses the user, e.g. darling",
            ),
            relationship,
            DimensionSpec::free(
                "vibe",
                Axis::Interaction,
                "contextual atmosphere, e.g. joyful",
            ),
            DimensionSpec::free("topic", Axis::Interaction, "topical focus, e.g. lunch"),
            DimensionSpec::free(
                "personality",
                Axis::Personal,
                "personality trait, e.g. outgoing",
            ),
            DimensionSpec::free("hobby", Axis::Personal, "a hobby, e.g. swimming"),
        ],
    }
}

impl PersonaSchema {
    /// Checks key uniqueness, closed-set consistency and axis coverage.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for dim in &self.dimensions {
            if dim.key.is_empty() {
                return Err(SchemaError::Invalid("empty dimension key".into()));
            }
            if !seen.insert(dim.key.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "duplicate dimension key {:?}",
                    dim.key
                )));
            }
            match (dim.value_kind, &dim.closed_values) {
                (ValueKind::ClosedSet, Some(values)) if !values.is_empty() => {
                    let mut canon = BTreeSet::new();
                    for v in values {
                        let c = fold_text(dim.text_form, v);
                        if c.is_empty() || !canon.insert(c) {
                            return Err(SchemaError::Invalid(format!(
                                "closed set of {:?} has an empty or duplicate value {:?}",
                                dim.key, v
                            )));
                        }
                    }
                }
                (ValueKind::ClosedSet, _) => {
                    return Err(SchemaError::Invalid(format!(
                        "closed set {:?} has no values",
                        dim.key
                    )))
                }
                (ValueKind::FreeText, Some(_)) => {
                    return Err(SchemaError::Invalid(format!(
                        "free-text dimension {:?} lists closed values",
                        dim.key
                    )))
                }
                (ValueKind::FreeText, None) => {}
            }
        }
        for axis in Axis::ALL {
            if !self.dimensions.iter().any(|d| d.axis == axis) {
                return Err(SchemaError::Invalid(format!(
                    "axis {axis} has no dimensions"
                )));
            }
        }
        Ok(())
    }

    pub fn dimension(&self, key: &str) -> Option<&DimensionSpec> {
        self.dimensions.iter().find(|d| d.key == key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.dimensions.iter().map(|d| d.key.as_str())
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn axis_keys(&self, axis: Axis) -> Vec<&str> {
        self.dimensions
            .iter()
            .filter(|d| d.axis == axis)
            .map(|d| d.key.as_str())
            .collect()
    }

    /// Adds extra members to a closed-set dimension.
    pub fn extend_closed_values(&mut self, key: &str, extra: &[&str]) -> Result<(), SchemaError> {
        let dim = self
            .dimensions
            .iter_mut()
            .find(|d| d.key == key)
            .ok_or_else(|| SchemaError::UnknownDimension(key.to_string()))?;
        let form = dim.text_form;
        let values = dim.closed_values.as_mut().ok_or_else(|| {
            SchemaError::Invalid(format!("{key:?} is not a closed-set dimension"))
        })?;
        for v in extra {
            let c = fold_text(form, v);
            if !c.is_empty() && !values.iter().any(|x| fold_text(form, x) == c) {
                values.push(c);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schema: PersonaSchema =
            serde_json::from_str(text).map_err(|e| SchemaError::Invalid(e.to_string()))?;
        if schema.schema_version != SCHEMA_VERSION {
            return Err(SchemaError::Invalid(format!(
                "unsupported schema_version {}",
                schema.schema_version
            )));
        }
        schema.validate()?;
        Ok(schema)
    }
}

/// A canonical persona value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonaValue(String);

impl PersonaValue {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps text that is already canonical for `dim`.
    pub fn from_canonical(dim: &DimensionSpec, text: &str) -> Result<Self, SchemaError> {
        match canonicalize(dim, text)? {
            Some(v) if v.0 == text => Ok(v),
            _ => Err(SchemaError::NotCanonical {
                dimension: dim.key.clone(),
                value: text.to_string(),
            }),
        }
    }
}

impl fmt::Display for PersonaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_variation_selector(c: char) -> bool {
    matches!(c, '\u{FE00}'..='\u{FE0F}' | '\u{E0100}'..='\u{E01EF}')
}

fn is_skin_tone(c: char) -> bool {
    matches!(c, '\u{1F3FB}'..='\u{1F3FF}')
}

/// Removes variation selectors and Fitzpatrick skin-tone modifiers.
pub fn strip_emoji_modifiers(text: &str) -> String {
    text.chars()
        .filter(|&c| !is_variation_selector(c) && !is_skin_tone(c))
        .collect()
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub(crate) fn fold_text(form: TextForm, raw: &str) -> String {
    match form {
        TextForm::Plain => collapse_whitespace(&raw.to_lowercase()),
        TextForm::Emoji => collapse_whitespace(&strip_emoji_modifiers(raw)),
    }
}

pub fn is_null_token(raw: &str) -> bool {
    let t = collapse_whitespace(&raw.to_lowercase());
    NULL_TOKENS.contains(&t.as_str())
}

/// Canonicalizes raw extractor output for `dim`. Null tokens map to `None`.
pub fn canonicalize(dim: &DimensionSpec, raw: &str) -> Result<Option<PersonaValue>, SchemaError> {
    if is_null_token(raw) {
        return Ok(None);
    }
    let folded = fold_text(dim.text_form, raw);
    if folded.is_empty() || is_null_token(&folded) {
        return Ok(None);
    }
    if let Some(values) = &dim.closed_values {
        if !values.iter().any(|v| fold_text(dim.text_form, v) == folded) {
            return Err(SchemaError::UnknownClosedValue {
                dimension: dim.key.clone(),
                value: folded,
            });
        }
    }
    Ok(Some(PersonaValue(folded)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extracted,
    Sampled,
    Absent,
}

/// A (possibly partial) point in the persona space.
///
/// Entries follow the schema's dimension order. Built only through
/// [`PersonaAssignment::empty`] and the setters so the key set always
/// matches the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaAssignment {
    entries: Vec<(String, Option<PersonaValue>, Provenance)>,
}

impl PersonaAssignment {
    /// Every dimension absent.
    pub fn empty(schema: &PersonaSchema) -> Self {
        PersonaAssignment {
            entries: schema
                .dimensions
                .iter()
                .map(|d| (d.key.clone(), None, Provenance::Absent))
                .collect(),
        }
    }

    fn slot(
        &mut self,
        key: &str,
    ) -> Result<&mut (String, Option<PersonaValue>, Provenance), SchemaError> {
        self.entries
            .iter_mut()
            .find(|(k, _, _)| k == key)
            .ok_or_else(|| SchemaError::UnknownDimension(key.to_string()))
    }

    pub fn set(
        &mut self,
        key: &str,
        value: PersonaValue,
        provenance: Provenance,
    ) -> Result<(), SchemaError> {
        if provenance == Provenance::Absent {
            return Err(SchemaError::Invalid(format!(
                "{key:?}: a present value cannot be absent"
            )));
        }
        let slot = self.slot(key)?;
        slot.1 = Some(value);
        slot.2 = provenance;
        Ok(())
    }

    pub fn clear(&mut self, key: &str) -> Result<(), SchemaError> {
        let slot = self.slot(key)?;
        slot.1 = None;
        slot.2 = Provenance::Absent;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&PersonaValue> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .and_then(|(_, v, _)| v.as_ref())
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, p)| *p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&PersonaValue>, Provenance)> {
        self.entries
            .iter()
            .map(|(k, v, p)| (k.as_str(), v.as_ref(), *p))
    }

    pub fn present(&self) -> impl Iterator<Item = (&str, &PersonaValue)> {
        self.entries
            .iter()
            .filter_map(|(k, v, _)| v.as_ref().map(|v| (k.as_str(), v)))
    }

    pub fn absent_keys(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, _, p)| *p == Provenance::Absent)
            .map(|(k, _, _)| k.as_str())
            .collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|(_, _, p)| *p == provenance)
            .count()
    }

    /// Verifies key set, provenance/value agreement and closed-set membership.
    pub fn validate(&self, schema: &PersonaSchema) -> Result<(), SchemaError> {
        if self.entries.len() != schema.len()
            || !self
                .entries
                .iter()
                .zip(&schema.dimensions)
                .all(|((k, _, _), d)| *k == d.key)
        {
            return Err(SchemaError::KeySetMismatch);
        }
        for ((key, value, prov), dim) in self.entries.iter().zip(&schema.dimensions) {
            match (value, prov) {
                (None, Provenance::Absent) => {}
                (Some(v), Provenance::Extracted | Provenance::Sampled) => {
                    PersonaValue::from_canonical(dim, v.as_str())?;
                }
                _ => {
                    return Err(SchemaError::Invalid(format!(
                        "{key:?}: provenance {prov:?} disagrees with value presence"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Flat JSON object with `null` for absent dimensions and a parallel `_provenance` object.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        let mut prov = Map::new();
        for (k, v, p) in &self.entries {
            obj.insert(
                k.clone(),
                v.as_ref()
                    .map_or(Value::Null, |v| Value::String(v.0.clone())),
            );
            prov.insert(
                k.clone(),
                serde_json::to_value(p).expect("provenance serializes"),
            );
        }
        obj.insert("_provenance".into(), Value::Object(prov));
        Value::Object(obj)
    }

    pub fn from_json(schema: &PersonaSchema, value: &Value) -> Result<Self, SchemaError> {
        let obj = value
            .as_object()
            .ok_or_else(|| SchemaError::Invalid("assignment is not a JSON object".into()))?;
        let prov = obj
            .get("_provenance")
            .and_then(Value::as_object)
            .ok_or_else(|| SchemaError::Invalid("assignment lacks _provenance".into()))?;
        let keys: BTreeSet<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| *k != "_provenance")
            .collect();
        let expected: BTreeSet<&str> = schema.keys().collect();
        if keys != expected || prov.keys().map(String::as_str).collect::<BTreeSet<_>>() != expected
        {
            return Err(SchemaError::KeySetMismatch);
        }
        let mut out = PersonaAssignment::empty(schema);
        for dim in &schema.dimensions {
            let p: Provenance = serde_json::from_value(prov[&dim.key].clone())
                .map_err(|e| SchemaError::Invalid(format!("{}: {e}", dim.key)))?;
            match (&obj[&dim.key], p) {
                (Value::Null, Provenance::Absent) => {}
                (Value::String(s), Provenance::Extracted | Provenance::Sampled) => {
                    let v = PersonaValue::from_canonical(dim, s)?;
                    out.set(&dim.key, v, p)?;
                }
                (other, p) => {
                    return Err(SchemaError::Invalid(format!(
                        "{}: value {other} inconsistent with provenance {p:?}",
                        dim.key
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl Serialize for PersonaAssignment {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

/// Builds an assignment from a loose `key -> value` map, canonicalizing each entry
/// and marking present values as extracted.
pub fn assignment_from_map(
    schema: &PersonaSchema,
    raw: &BTreeMap<String, String>,
) -> Result<PersonaAssignment, SchemaError> {
    let mut out = PersonaAssignment::empty(schema);
    for (key, text) in raw {
        let dim = schema
            .dimension(key)
            .ok_or_else(|| SchemaError::UnknownDimension(key.clone()))?;
        if let Some(v) = canonicalize(dim, text)? {
            out.set(key, v, Provenance::Extracted)?;
        }
    }
    Ok(out)
}

/// True iff no dimension is absent.
pub fn assignment_complete(
    a: &PersonaAssignment,
    schema: &PersonaSchema,
) -> Result<bool, SchemaError> {
    a.validate(schema)?;
    Ok(a.count(Provenance::Absent) == 0)
}

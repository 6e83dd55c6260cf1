//! Empirical per-dimension prior over observed persona values, and seeded
//! fill-in of absent dimensions.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::PriorError;
use crate::extraction::ExtractionRecord;
use crate::schema::{PersonaAssignment, PersonaSchema, PersonaValue, Provenance};
use crate::seed::stream_rng;

pub const PRIOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub value: PersonaValue,
    pub count: u64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionPrior {
    pub key: String,
    /// Sorted by value.
    pub entries: Vec<PriorEntry>,
    pub total: u64,
}

impl DimensionPrior {
    fn from_counts(key: &str, counts: BTreeMap<PersonaValue, u64>) -> Self {
        let total: u64 = counts.values().sum();
        let entries = counts
            .into_iter()
            .map(|(value, count)| PriorEntry {
                value,
                count,
                prob: count as f64 / total as f64,
            })
            .collect();
        DimensionPrior {
            key: key.to_string(),
            entries,
            total,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero outside the support.
    pub fn probability(&self, value: &PersonaValue) -> f64 {
        self.entries
            .binary_search_by(|e| e.value.cmp(value))
            .map_or(0.0, |i| self.entries[i].prob)
    }

    pub fn support(&self) -> impl Iterator<Item = &PersonaValue> {
        self.entries.iter().map(|e| &e.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub source: String,
    /// One per schema dimension, in schema order.
    pub dimensions: Vec<DimensionPrior>,
}

/// Counts extracted values per dimension; sampled and absent values contribute nothing.
pub fn build_prior_from_assignments<'a>(
    assignments: impl IntoIterator<Item = &'a PersonaAssignment>,
    schema: &PersonaSchema,
    source: &str,
) -> Result<Prior, PriorError> {
    let mut counts: Vec<BTreeMap<PersonaValue, u64>> = vec![BTreeMap::new(); schema.len()];
    let mut n = 0usize;
    for a in assignments {
        a.validate(schema)?;
        n += 1;
        for (slot, (_, value, prov)) in counts.iter_mut().zip(a.iter()) {
            if let (Some(v), Provenance::Extracted) = (value, prov) {
                *slot.entry(v.clone()).or_default() += 1;
            }
        }
    }
    if n == 0 {
        return Err(PriorError::Empty);
    }
    Ok(Prior {
        source: source.to_string(),
        dimensions: schema
            .dimensions
            .iter()
            .zip(counts)
            .map(|(d, c)| DimensionPrior::from_counts(&d.key, c))
            .collect(),
    })
}

pub fn build_prior(
    records: &[ExtractionRecord],
    schema: &PersonaSchema,
    source: &str,
) -> Result<Prior, PriorError> {
    build_prior_from_assignments(records.iter().map(|r| &r.assignment), schema, source)
}

impl Prior {
    pub fn dimension(&self, key: &str) -> Option<&DimensionPrior> {
        self.dimensions.iter().find(|d| d.key == key)
    }

    pub fn empty_dimensions(&self) -> Vec<&str> {
        self.dimensions
            .iter()
            .filter(|d| d.is_empty())
            .map(|d| d.key.as_str())
            .collect()
    }

    /// `{"prior_version": 1, "source": ..., <dim_key>: {"values": [{value, count, prob}], "total": n}}`
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("prior_version".into(), PRIOR_VERSION.into());
        obj.insert("source".into(), self.source.clone().into());
        for d in &self.dimensions {
            obj.insert(
                d.key.clone(),
                serde_json::json!({ "values": d.entries, "total": d.total }),
            );
        }
        Value::Object(obj)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("prior serializes");
        s.push('\n');
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_string().as_bytes()))
    }

    pub fn from_json(text: &str, schema: &PersonaSchema) -> Result<Self, PriorError> {
        let v: Value = serde_json::from_str(text).map_err(|e| PriorError::Format(e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| PriorError::Format("not an object".into()))?;
        match obj.get("prior_version").and_then(Value::as_u64) {
            Some(v) if v == PRIOR_VERSION as u64 => {}
            other => {
                return Err(PriorError::Format(format!(
                    "unsupported prior_version {other:?}"
                )))
            }
        }
        let source = obj
            .get("source")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let mut dimensions = Vec::with_capacity(schema.len());
        for dim in &schema.dimensions {
            let entry = obj
                .get(&dim.key)
                .ok_or_else(|| PriorError::MissingDimension(dim.key.clone()))?;
            let values: Vec<PriorEntry> = serde_json::from_value(entry["values"].clone())
                .map_err(|e| PriorError::Format(format!("{}: {e}", dim.key)))?;
            let mut counts = BTreeMap::new();
            for e in values {
                PersonaValue::from_canonical(dim, e.value.as_str())?;
                if e.count == 0 || counts.insert(e.value.clone(), e.count).is_some() {
                    return Err(PriorError::Format(format!(
                        "{}: bad entry {:?}",
                        dim.key, e.value
                    )));
                }
            }
            let d = DimensionPrior::from_counts(&dim.key, counts);
            if entry["total"].as_u64() != Some(d.total) {
                return Err(PriorError::Format(format!(
                    "{}: total does not match counts",
                    dim.key
                )));
            }
            dimensions.push(d);
        }
        Ok(Prior { source, dimensions })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Draw in proportion to observed counts.
    #[default]
    Frequency,
    /// Draw uniformly over the observed support.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct SeededSampler {
    seed: u64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl SeededSampler {
    pub fn new(seed: u64) -> Self {
        SeededSampler {
            seed,
            rng: stream_rng(seed, &[]),
            draws: 0,
        }
    }

    /// Independent stream for one labelled slot, e.g. `(session, turn, dimension)`.
    pub fn for_stream(seed: u64, parts: &[&str]) -> Self {
        SeededSampler {
            seed,
            rng: stream_rng(seed, parts),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// `None` for an empty support.
    pub fn draw<'p>(
        &mut self,
        dim: &'p DimensionPrior,
        mode: SamplingMode,
    ) -> Option<&'p PersonaValue> {
        if dim.is_empty() {
            return None;
        }
        self.draws += 1;
        let i = match mode {
            SamplingMode::Frequency => WeightedIndex::new(dim.entries.iter().map(|e| e.count))
                .expect("positive counts")
                .sample(&mut self.rng),
            SamplingMode::Uniform => self.rng.gen_range(0..dim.entries.len()),
        };
        Some(&dim.entries[i].value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillOutcome {
    pub assignment: PersonaAssignment,
    /// Absent dimensions left absent because their support is empty.
    pub unfilled: Vec<String>,
    pub draws: u64,
}

fn fill_with(
    a: &PersonaAssignment,
    prior: &Prior,
    mut sampler_for: impl FnMut(&str) -> Option<PersonaValue>,
) -> Result<FillOutcome, PriorError> {
    let mut out = a.clone();
    let mut unfilled = Vec::new();
    let mut draws = 0;
    for key in a.absent_keys() {
        let dim = prior
            .dimension(key)
            .ok_or_else(|| PriorError::MissingDimension(key.to_string()))?;
        if dim.is_empty() {
            unfilled.push(key.to_string());
            continue;
        }
        let v = sampler_for(key).expect("non-empty support");
        draws += 1;
        out.set(key, v, Provenance::Sampled)?;
    }
    Ok(FillOutcome {
        assignment: out,
        unfilled,
        draws,
    })
}

/// Fills absent dimensions in schema order from a single sampler stream.
pub fn sample_fill(
    a: &PersonaAssignment,
    prior: &Prior,
    sampler: &mut SeededSampler,
    mode: SamplingMode,
) -> Result<FillOutcome, PriorError> {
    fill_with(a, prior, |key| {
        let dim = prior.dimension(key)?;
        sampler.draw(dim, mode).cloned()
    })
}

/// Fills each absent dimension from its own `(seed, session, turn, dimension)`
/// stream, so the result does not depend on the order records are processed.
pub fn sample_fill_keyed(
    a: &PersonaAssignment,
    prior: &Prior,
    seed: u64,
    session_id: &str,
    turn_index: usize,
    mode: SamplingMode,
) -> Result<FillOutcome, PriorError> {
    let turn = turn_index.to_string();
    fill_with(a, prior, |key| {
        let dim = prior.dimension(key)?;
        SeededSampler::for_stream(seed, &["fill", session_id, &turn, key])
            .draw(dim, mode)
            .cloned()
    })
}

/// Sum of log prior masses over present dimensions.
pub fn prior_log_mass(a: &PersonaAssignment, prior: &Prior) -> Result<f64, PriorError> {
    a.present().try_fold(0.0, |acc, (key, value)| {
        let dim = prior
            .dimension(key)
            .ok_or_else(|| PriorError::MissingDimension(key.to_string()))?;
        let p = dim.probability(value);
        if p == 0.0 {
            return Err(PriorError::Support {
                dimension: key.to_string(),
                value: value.to_string(),
            });
        }
        Ok(acc + p.ln())
    })
}

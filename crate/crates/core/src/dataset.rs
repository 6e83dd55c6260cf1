//! Persona-conditioned SFT corpus assembly.
//!
//! Each annotated AI turn becomes one example: the persona block sits in the
//! system message, the preceding turns become the conversation, and the AI
//! turn is the target. Variants differ only in the persona block:
//!
//! * `ft`: no persona block.
//! * `p_ft`: extracted dimensions only.
//! * `sp_ft`: extracted dimensions plus prior draws for the absent ones.
//! * `unstructured`: the free-text analysis in place of the structured block.
//!
//! `excluded_axes` removes whole axes from `p_ft`/`sp_ft` blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BuildError;
use crate::extraction::{AnalysisRecord, ExtractionRecord};
use crate::ingest::{ContextTargetPair, Speaker};
use crate::prior::{sample_fill_keyed, Prior, SamplingMode};
use crate::schema::{Axis, PersonaAssignment, PersonaSchema, Provenance, SCHEMA_VERSION};

pub const ROLE_PREAMBLE: &str =
    "You are a real person chatting with the user. Reply naturally, the way a human would in a casual chat.";
pub const PERSONA_HEADER: &str = "[Persona]";
pub const ANALYSIS_HEADER: &str = "[Persona analysis]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ft,
    PFt,
    SpFt,
    Unstructured,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ft => "ft",
            Variant::PFt => "p_ft",
            Variant::SpFt => "sp_ft",
            Variant::Unstructured => "unstructured",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = BuildError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ft" => Ok(Variant::Ft),
            "p_ft" => Ok(Variant::PFt),
            "sp_ft" => Ok(Variant::SpFt),
            "unstructured" => Ok(Variant::Unstructured),
            other => Err(BuildError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub variant: Variant,
    #[serde(default)]
    pub excluded_axes: BTreeSet<Axis>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingMode,
}

impl BuildConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        BuildConfig {
            variant,
            excluded_axes: BTreeSet::new(),
            seed,
            sampling: SamplingMode::Frequency,
        }
    }

    pub fn excluding(mut self, axis: Axis) -> Self {
        self.excluded_axes.insert(axis);
        self
    }

    pub fn validate(&self, prior: Option<&Prior>) -> Result<(), BuildError> {
        if !self.excluded_axes.is_empty() && !matches!(self.variant, Variant::PFt | Variant::SpFt) {
            return Err(BuildError::Config(format!(
                "axis exclusion applies to p_ft and sp_ft only, not {}",
                self.variant
            )));
        }
        if self.variant == Variant::SpFt && prior.is_none() {
            return Err(BuildError::Config("sp_ft requires a prior".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub variant: Variant,
    pub session_id: String,
    pub target_index: usize,
    /// Provenance of every rendered dimension.
    pub provenance: BTreeMap<String, Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub system: String,
    pub messages: Vec<SftMessage>,
    pub target: String,
    pub meta: ExampleMeta,
}

impl TrainingExample {
    /// The persona block carried in the system message, empty if none.
    pub fn persona_block(&self) -> &str {
        self.system
            .split_once(&format!("\n\n{PERSONA_HEADER}\n"))
            .or_else(|| self.system.split_once(&format!("\n\n{ANALYSIS_HEADER}\n")))
            .map_or("", |(_, block)| block)
    }
}

/// `key: value` lines for present dimensions, in schema order.
pub fn render_persona_block(a: &PersonaAssignment, schema: &PersonaSchema) -> String {
    schema
        .dimensions
        .iter()
        .filter_map(|d| a.get(&d.key).map(|v| format!("{}: {}", d.key, v)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn system_message(header: &str, block: &str) -> String {
    if block.is_empty() {
        ROLE_PREAMBLE.to_string()
    } else {
        format!("{ROLE_PREAMBLE}\n\n{header}\n{block}")
    }
}

fn drop_axes(a: &mut PersonaAssignment, schema: &PersonaSchema, axes: &BTreeSet<Axis>) {
    for d in schema.dimensions.iter().filter(|d| axes.contains(&d.axis)) {
        a.clear(&d.key).expect("schema key");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub examples: Vec<TrainingExample>,
    /// Per dimension, how many sp_ft examples had nothing to sample from.
    pub unfilled: BTreeMap<String, usize>,
}

pub struct BuildInputs<'a> {
    pub pairs: &'a [ContextTargetPair],
    pub extractions: &'a [ExtractionRecord],
    pub analyses: &'a [AnalysisRecord],
    pub prior: Option<&'a Prior>,
    pub schema: &'a PersonaSchema,
}

pub fn build(inputs: &BuildInputs<'_>, cfg: &BuildConfig) -> Result<BuildOutput, BuildError> {
    cfg.validate(inputs.prior)?;
    let extractions: HashMap<(&str, usize), &ExtractionRecord> = inputs
        .extractions
        .iter()
        .map(|r| ((r.session_id.as_str(), r.turn_index), r))
        .collect();
    let analyses: HashMap<(&str, usize), &AnalysisRecord> = inputs
        .analyses
        .iter()
        .map(|r| ((r.session_id.as_str(), r.turn_index), r))
        .collect();
    let missing = |p: &ContextTargetPair| BuildError::MissingExtraction {
        session_id: p.session_id.clone(),
        target_index: p.target_index,
    };

    let mut unfilled: BTreeMap<String, usize> = BTreeMap::new();
    let mut examples = Vec::with_capacity(inputs.pairs.len());
    for pair in inputs.pairs {
        let key = (pair.session_id.as_str(), pair.target_index);
        let (system, provenance) = match cfg.variant {
            Variant::Ft => (system_message(PERSONA_HEADER, ""), BTreeMap::new()),
            Variant::Unstructured => {
                let a = analyses.get(&key).ok_or_else(|| missing(pair))?;
                (
                    system_message(ANALYSIS_HEADER, a.analysis.trim()),
                    BTreeMap::new(),
                )
            }
            Variant::PFt | Variant::SpFt => {
                let record = extractions.get(&key).ok_or_else(|| missing(pair))?;
                record.assignment.validate(inputs.schema)?;
                let mut a = record.assignment.clone();
                if cfg.variant == Variant::SpFt {
                    let prior = inputs.prior.expect("validated");
                    let fill = sample_fill_keyed(
                        &a,
                        prior,
                        cfg.seed,
                        &pair.session_id,
                        pair.target_index,
                        cfg.sampling,
                    )?;
                    for k in &fill.unfilled {
                        *unfilled.entry(k.clone()).or_default() += 1;
                    }
                    a = fill.assignment;
                } else {
                    // p_ft carries only what the extractor reported
                    let sampled: Vec<String> = a
                        .iter()
                        .filter(|(_, _, p)| *p == Provenance::Sampled)
                        .map(|(k, _, _)| k.to_string())
                        .collect();
                    for k in sampled {
                        a.clear(&k)?;
                    }
                }
                drop_axes(&mut a, inputs.schema, &cfg.excluded_axes);
                let provenance = a
                    .iter()
                    .filter(|(_, v, _)| v.is_some())
                    .map(|(k, _, p)| (k.to_string(), p))
                    .collect();
                (
                    system_message(PERSONA_HEADER, &render_persona_block(&a, inputs.schema)),
                    provenance,
                )
            }
        };
        let messages = pair
            .context
            .iter()
            .map(|t| SftMessage {
                role: match t.role {
                    Speaker::User => "user",
                    Speaker::Ai => "assistant",
                }
                .to_string(),
                content: t.text.clone(),
            })
            .collect();
        examples.push(TrainingExample {
            system,
            messages,
            target: pair.target.text.clone(),
            meta: ExampleMeta {
                variant: cfg.variant,
                session_id: pair.session_id.clone(),
                target_index: pair.target_index,
                provenance,
            },
        });
    }
    Ok(BuildOutput { examples, unfilled })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub variant: Variant,
    pub excluded_axes: Vec<Axis>,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub prior_sha: Option<String>,
    pub n_examples: usize,
    pub schema_version: u32,
    pub dataset_sha: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn to_jsonl(examples: &[TrainingExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).expect("example serializes");
        out.push(b'\n');
    }
    out
}

/// Writes SFT JSONL and a `<file>.manifest.json` sidecar.
pub fn emit(
    examples: &[TrainingExample],
    path: &Path,
    cfg: &BuildConfig,
    prior: Option<&Prior>,
) -> Result<DatasetManifest, BuildError> {
    let body = to_jsonl(examples);
    let manifest = DatasetManifest {
        variant: cfg.variant,
        excluded_axes: cfg.excluded_axes.iter().copied().collect(),
        seed: cfg.seed,
        sampling: cfg.sampling,
        prior_sha: prior.map(Prior::sha256),
        n_examples: examples.len(),
        schema_version: SCHEMA_VERSION,
        dataset_sha: hex::encode(Sha256::digest(&body)),
    };
    fs::write(path, &body).map_err(|source| BuildError::Io {
        path: path.into(),
        source,
    })?;
    let mpath = manifest_path(path);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mpath, text).map_err(|source| BuildError::Io {
        path: mpath,
        source,
    })?;
    Ok(manifest)
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>, BuildError> {
    let text = fs::read_to_string(path).map_err(|source| BuildError::Io {
        path: path.into(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| BuildError::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

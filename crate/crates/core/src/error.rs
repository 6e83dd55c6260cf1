use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("unknown dimension {0:?}")]
    UnknownDimension(String),
    #[error("unknown axis {0:?}")]
    UnknownAxis(String),
    #[error("value {value:?} is not a member of closed dimension {dimension:?}")]
    UnknownClosedValue { dimension: String, value: String },
    #[error("value {value:?} is not canonical for dimension {dimension:?}")]
    NotCanonical { dimension: String, value: String },
    #[error("assignment key set does not match the schema")]
    KeySetMismatch,
    #[error("invalid schema or assignment: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("API returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("cache entry {path} is corrupt: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error("template is missing a binding for placeholder {0:?}")]
    Template(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("invalid chat request: {0}")]
    Request(String),
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extractor reply is not valid JSON after repair: {reason}")]
    Unparseable { reason: String, raw_reply: String },
    #[error("extractor returned an empty reply")]
    EmptyReply,
    #[error("invalid extraction input: {0}")]
    Input(String),
    #[error("candidate is not canonical: {0}")]
    InvalidValue(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("value {value:?} is outside the support of {dimension:?}")]
    Support { dimension: String, value: String },
    #[error("prior does not cover dimension {0:?}")]
    MissingDimension(String),
    #[error("cannot build a prior from zero records")]
    Empty,
    #[error("malformed prior document: {0}")]
    Format(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("turn {index} of session {session_id:?} is not an AI turn")]
    Pairing { session_id: String, index: usize },
    #[error("cap quantile {0} is outside (0, 1]")]
    InvalidQuantile(f64),
    #[error("invalid scrub rule {pattern:?}: {reason}")]
    Rule { pattern: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("no extraction for pair ({session_id}, {target_index})")]
    MissingExtraction {
        session_id: String,
        target_index: usize,
    },
    #[error("invalid build config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Ingest { line: usize, reason: String },
    #[error("no evaluation items")]
    NoItems,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed targets file: {0}")]
    Targets(String),
}

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("marginal likelihood is zero; NLL is infinite")]
    InfiniteNll,
    #[error("posterior puts mass on a latent state with zero prior; KL is infinite")]
    InfiniteKl,
    #[error("invalid toy model: {0}")]
    Model(String),
    #[error("invalid posterior table: {0}")]
    Posterior(String),
    #[error("no observation ({x}, {c}) in the model")]
    UnknownObservation { x: String, c: String },
}

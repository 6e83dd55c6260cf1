//! Building blocks for persona-conditioned chat corpora: a structured latent
//! persona space, an LLM-backed extractor, an empirical prior with seeded
//! fill-in sampling, SFT corpus assembly, human-likeness metrics, and an
//! exact checker for the variational bound on enumerable toy models.

pub mod bound;
pub mod dataset;
pub mod error;
pub mod extraction;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod prior;
pub mod schema;
pub mod seed;

pub use error::*;

//! Pipeline configuration file (TOML). Every field is optional; command-line
//! flags override whatever the file sets. Relative paths are resolved against
//! the directory holding the file.
//!
//! ```toml
//! seed = 7
//! jobs = 4
//! schema_version = 1
//!
//! [paths]
//! sessions = "data/sessions.jsonl"
//! pairs = "out/pairs.jsonl"
//! extractions = "out/extractions.jsonl"
//! analyses = "out/analyses.jsonl"
//! prior = "out/prior.json"
//! datasets = "out/datasets"
//! outputs = "out/outputs.jsonl"
//! targets = "targets.json"
//! cache = ".cache/llm"
//!
//! [backend]
//! kind = "remote"            # or "mock"
//! endpoint = "https://host/v1/chat/completions"
//! model = "some-model"
//! token_env = "PERSONA_API_TOKEN"
//! max_concurrent = 4
//! timeout_secs = 120
//! retry = { max_attempts = 3, backoff_base_ms = 500 }
//! mock_rules = "mock_rules.json"
//!
//! [ingest]
//! cap_quantile = 0.95
//! strict = false
//! default_scrub = true
//! names = ["Alice"]
//! locations = ["Springfield"]
//! rules = [{ pattern = "\\b\\d{6}\\b", replacement = "[ID]" }]
//!
//! [dataset]
//! variant = "sp_ft"
//! exclude_axes = ["talking"]
//! sampling = "frequency"     # or "uniform"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use persona_core::llm::BackendConfig;
use persona_core::prior::SamplingMode;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub schema_version: Option<u32>,
    pub paths: Paths,
    pub backend: BackendConfig,
    pub ingest: IngestSection,
    pub dataset: DatasetSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub sessions: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub extractions: Option<PathBuf>,
    pub analyses: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub datasets: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RuleSpec {
    pub pattern: String,
    pub replacement: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub cap_quantile: Option<f64>,
    pub strict: bool,
    pub default_scrub: bool,
    pub names: Vec<String>,
    pub locations: Vec<String>,
    pub rules: Vec<RuleSpec>,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            cap_quantile: None,
            strict: false,
            default_scrub: true,
            names: Vec::new(),
            locations: Vec::new(),
            rules: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub variant: Option<String>,
    pub exclude_axes: Vec<String>,
    pub sampling: Option<SamplingMode>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.sessions,
            &mut p.pairs,
            &mut p.extractions,
            &mut p.analyses,
            &mut p.prior,
            &mut p.datasets,
            &mut p.outputs,
            &mut p.targets,
            &mut p.cache,
        ] {
            fix(slot);
        }
        fix(&mut self.backend.cache_dir);
        fix(&mut self.backend.mock_rules);
        if self.backend.cache_dir.is_none() {
            self.backend.cache_dir = self.paths.cache.clone();
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use persona_core::bound::{reference_models, verify_bound, BoundReport, ToyModel};
use persona_core::dataset::{self, BuildConfig, BuildInputs, Variant};
use persona_core::extraction::{read_records, write_records, AnalysisRecord, Extractor};
use persona_core::ingest::{self, ScrubRule, ScrubRules};
use persona_core::llm::{BackendKind, LlmClient};
use persona_core::metrics::{self, Targets};
use persona_core::prior::{build_prior, Prior, SamplingMode};
use persona_core::schema::{default_schema, Axis, PersonaSchema, Provenance, SCHEMA_VERSION};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::config::PipelineConfig;
use crate::manifest::{sha256_hex, Manifest};

/// Exit status 2 for usage and configuration problems, 1 for stage failures.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Stage(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Stage(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Stage(e) => e,
        }
    }
}

pub type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn stage(self) -> Result<T, Failure>;
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn stage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(e.into()))
    }
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

pub struct Env {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub pool: rayon::ThreadPool,
}

impl Env {
    pub fn new(global: &GlobalArgs) -> Result<Self, Failure> {
        let cfg = match &global.config {
            Some(p) => PipelineConfig::load(p).usage()?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = cfg.schema_version.filter(|v| *v != SCHEMA_VERSION) {
            return Err(usage(format!(
                "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
            )));
        }
        let seed = global.seed.or(cfg.seed).unwrap_or(0);
        let jobs = global.jobs.or(cfg.jobs).unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .usage()?;
        Ok(Env { cfg, seed, pool })
    }

    fn schema(&self) -> PersonaSchema {
        default_schema()
    }
}

/// An input path from the flag or the config file; it must exist.
fn input(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    let path = flag
        .clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage(format!("no {name} path: pass --{name} or set paths.{name}")))?;
    if !path.is_file() {
        return Err(usage(format!(
            "{name} file {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn output(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    let path = flag
        .clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage(format!("no output path: pass --out or set paths.{name}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .stage()?;
    }
    Ok(path)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("serializes");
        out.push(b'\n');
    }
    fs::write(path, out)
        .with_context(|| format!("writing {}", path.display()))
        .stage()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .stage()
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).expect("serializes");
    writeln!(out).stage()
}

pub fn ingest(ctx: &Env, a: &IngestArgs) -> Outcome {
    let sessions_path = input(&a.sessions, &ctx.cfg.paths.sessions, "sessions")?;
    let out = output(&a.out, &ctx.cfg.paths.pairs, "pairs")?;
    let sec = &ctx.cfg.ingest;
    let q = a.cap_quantile.or(sec.cap_quantile).unwrap_or(0.95);
    let strict = a.strict || sec.strict;

    let mut rules = if sec.default_scrub {
        ScrubRules::defaults()
    } else {
        ScrubRules::none()
    };
    let names: Vec<&str> = sec.names.iter().map(String::as_str).collect();
    let places: Vec<&str> = sec.locations.iter().map(String::as_str).collect();
    rules = rules
        .with_names(&names)
        .usage()?
        .with_locations(&places)
        .usage()?;
    for r in &sec.rules {
        rules.push(ScrubRule::new(&r.pattern, &r.replacement).usage()?);
    }

    let report = ingest::load_sessions(&sessions_path, &rules, strict).stage()?;
    let loaded = ingest::stats(&report.sessions);
    let kept = ingest::subsample_agents(report.sessions, q, ctx.seed).usage()?;
    let kept_stats = ingest::stats(&kept);
    let pairs: Vec<_> = ctx
        .pool
        .install(|| {
            kept.par_iter()
                .map(|s| ingest::pair_targets(s, None))
                .collect::<Result<Vec<_>, _>>()
        })
        .stage()?
        .into_iter()
        .flatten()
        .collect();
    ingest::write_pairs(&out, &pairs).stage()?;
    log::info!(
        "{} sessions from {} agents kept; {} pairs written to {}",
        kept_stats.n_sessions,
        kept_stats.n_agents,
        pairs.len(),
        out.display()
    );

    let mut manifest = Manifest::new("ingest", ctx.seed)
        .input("sessions", &sessions_path)
        .stage()?;
    if let Some(path) = &a.sessions_out {
        ingest::write_sessions(path, &kept).stage()?;
        manifest = manifest.output("sessions", path).stage()?;
    }
    manifest
        .output("pairs", &out)
        .stage()?
        .details(json!({
            "cap_quantile": q,
            "strict": strict,
            "skipped_lines": report.skipped.len(),
            "dropped_empty_sessions": report.dropped_empty,
            "loaded": loaded,
            "kept": kept_stats,
            "n_pairs": pairs.len(),
        }))
        .write_for(&out)
        .stage()?;
    Ok(())
}

pub fn extract(ctx: &Env, a: &ExtractArgs) -> Outcome {
    let pairs_path = input(&a.pairs, &ctx.cfg.paths.pairs, "pairs")?;
    let out = output(&a.out, &ctx.cfg.paths.extractions, "extractions")?;
    let mut backend = ctx.cfg.backend.clone();
    if a.mock {
        backend.kind = BackendKind::Mock;
    }
    if let Some(p) = &a.mock_rules {
        backend.mock_rules = Some(p.clone());
    }
    if let Some(m) = &a.model {
        backend.model = m.clone();
    }
    if let Some(e) = &a.endpoint {
        backend.endpoint = Some(e.clone());
    }
    if let Some(c) = &a.cache_dir {
        backend.cache_dir = Some(c.clone());
    }
    if let Some(n) = a.max_concurrent {
        backend.max_concurrent = n;
    }
    let client = LlmClient::from_config(backend.clone()).usage()?;
    let schema = ctx.schema();
    let extractor = Extractor::new(&client, &schema);
    let pairs = ingest::read_pairs(&pairs_path).stage()?;

    let records = ctx
        .pool
        .install(|| {
            pairs
                .par_iter()
                .map(|p| extractor.extract_pair(p))
                .collect::<Result<Vec<_>, _>>()
        })
        .stage()?;
    write_records(&out, &records)
        .with_context(|| format!("writing {}", out.display()))
        .stage()?;

    let extracted: BTreeMap<&str, usize> = schema
        .keys()
        .map(|k| {
            let n = records
                .iter()
                .filter(|r| r.assignment.provenance(k) == Some(Provenance::Extracted))
                .count();
            (k, n)
        })
        .collect();
    log::info!(
        "{} extraction records written to {}",
        records.len(),
        out.display()
    );

    let analyses_path = a
        .analyses_out
        .clone()
        .or_else(|| ctx.cfg.paths.analyses.clone().filter(|_| a.unstructured));
    let mut manifest = Manifest::new("extract", ctx.seed)
        .input("pairs", &pairs_path)
        .stage()?;
    if let Some(path) = &analyses_path {
        let analyses = ctx
            .pool
            .install(|| {
                pairs
                    .par_iter()
                    .map(|p| extractor.analyze_pair(p))
                    .collect::<Result<Vec<_>, _>>()
            })
            .stage()?;
        write_jsonl(path, &analyses)?;
        log::info!("{} analyses written to {}", analyses.len(), path.display());
        manifest = manifest.output("analyses", path).stage()?;
        manifest
            .clone()
            .details(json!({"model": client.model(), "n_records": analyses.len()}))
            .write_for(path)
            .stage()?;
    }
    manifest
        .output("extractions", &out)
        .stage()?
        .details(json!({
            "backend": backend.kind,
            "model": client.model(),
            "n_records": records.len(),
            "extracted_per_dimension": extracted,
        }))
        .write_for(&out)
        .stage()?;
    Ok(())
}

pub fn build_prior_cmd(ctx: &Env, a: &BuildPriorArgs) -> Outcome {
    let ext_path = input(&a.extractions, &ctx.cfg.paths.extractions, "extractions")?;
    let out = output(&a.out, &ctx.cfg.paths.prior, "prior")?;
    let schema = ctx.schema();
    let records = read_records(&ext_path, &schema).stage()?;
    let source = a.source.clone().unwrap_or_else(|| {
        ext_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let prior = build_prior(&records, &schema, &source).stage()?;
    fs::write(&out, prior.to_json_string())
        .with_context(|| format!("writing {}", out.display()))
        .stage()?;
    let empty = prior.empty_dimensions();
    if !empty.is_empty() {
        log::warn!("dimensions with empty support: {}", empty.join(", "));
    }
    Manifest::new("build-prior", ctx.seed)
        .input("extractions", &ext_path)
        .stage()?
        .output("prior", &out)
        .stage()?
        .details(json!({"n_records": records.len(), "empty_dimensions": empty, "prior_sha": prior.sha256()}))
        .write_for(&out)
        .stage()?;
    Ok(())
}

fn read_analyses(path: &Path) -> Result<Vec<AnalysisRecord>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .stage()?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{} record {}", path.display(), i + 1))
                .stage()
        })
        .collect()
}

pub fn build_dataset(ctx: &Env, a: &BuildDatasetArgs) -> Outcome {
    let sec = &ctx.cfg.dataset;
    let variant: Variant = a
        .variant
        .clone()
        .or_else(|| sec.variant.clone())
        .ok_or_else(|| usage("no variant: pass --variant or set dataset.variant".into()))?
        .parse()
        .usage()?;
    let axes: Vec<Axis> = if a.exclude_axis.is_empty() {
        &sec.exclude_axes
    } else {
        &a.exclude_axis
    }
    .iter()
    .map(|s| s.parse())
    .collect::<Result<_, _>>()
    .usage()?;
    let mut cfg = BuildConfig::new(variant, ctx.seed);
    cfg.sampling = a
        .sampling
        .or(sec.sampling)
        .unwrap_or(SamplingMode::Frequency);
    for axis in axes {
        cfg = cfg.excluding(axis);
    }
    let prior_flag = a.prior.clone().or_else(|| {
        (variant == Variant::SpFt)
            .then(|| ctx.cfg.paths.prior.clone())
            .flatten()
    });
    if variant == Variant::SpFt && prior_flag.is_none() {
        return Err(usage(
            "sp_ft requires a prior: pass --prior or set paths.prior".into(),
        ));
    }

    let schema = ctx.schema();
    let pairs_path = input(&a.pairs, &ctx.cfg.paths.pairs, "pairs")?;
    let pairs = ingest::read_pairs(&pairs_path).stage()?;
    let mut manifest = Manifest::new("build-dataset", ctx.seed)
        .input("pairs", &pairs_path)
        .stage()?;

    let prior = match &prior_flag {
        Some(p) => {
            let path = input(&Some(p.clone()), &None, "prior")?;
            manifest = manifest.input("prior", &path).stage()?;
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))
                .stage()?;
            Some(Prior::from_json(&text, &schema).stage()?)
        }
        None => None,
    };
    cfg.validate(prior.as_ref()).usage()?;
    let extractions = if matches!(variant, Variant::PFt | Variant::SpFt) {
        let path = input(&a.extractions, &ctx.cfg.paths.extractions, "extractions")?;
        manifest = manifest.input("extractions", &path).stage()?;
        read_records(&path, &schema).stage()?
    } else {
        Vec::new()
    };
    let analyses = if variant == Variant::Unstructured {
        let path = input(&a.analyses, &ctx.cfg.paths.analyses, "analyses")?;
        manifest = manifest.input("analyses", &path).stage()?;
        read_analyses(&path)?
    } else {
        Vec::new()
    };

    let built = dataset::build(
        &BuildInputs {
            pairs: &pairs,
            extractions: &extractions,
            analyses: &analyses,
            prior: prior.as_ref(),
            schema: &schema,
        },
        &cfg,
    )
    .stage()?;
    for (k, n) in &built.unfilled {
        log::warn!("{n} examples left {k} absent: empty prior support");
    }
    let out = match (&a.out, &ctx.cfg.paths.datasets) {
        (Some(p), _) => output(&Some(p.clone()), &None, "datasets")?,
        (None, Some(dir)) => {
            let mut name = variant.as_str().to_string();
            for axis in &cfg.excluded_axes {
                name.push_str(&format!("-no_{}", axis.as_str()));
            }
            output(&Some(dir.join(format!("{name}.jsonl"))), &None, "datasets")?
        }
        (None, None) => {
            return Err(usage(
                "no output path: pass --out or set paths.datasets".into(),
            ))
        }
    };
    let ds = dataset::emit(&built.examples, &out, &cfg, prior.as_ref()).stage()?;
    log::info!(
        "{} {} examples written to {}",
        ds.n_examples,
        variant,
        out.display()
    );
    // replaces the sidecar emit() wrote with one that also carries input hashes
    manifest
        .output("dataset", &out)
        .stage()?
        .details(json!({"dataset": ds, "unfilled": built.unfilled}))
        .write_for(&out)
        .stage()?;
    Ok(())
}

pub fn evaluate(ctx: &Env, a: &EvaluateArgs) -> Outcome {
    let outputs_path = input(&a.outputs, &ctx.cfg.paths.outputs, "outputs")?;
    let targets_path = a.targets.clone().or_else(|| ctx.cfg.paths.targets.clone());
    let targets = match &targets_path {
        Some(p) => Targets::load(&input(&Some(p.clone()), &None, "targets")?).usage()?,
        None => Targets::reference(),
    };
    let items = metrics::load_outputs(&outputs_path).stage()?;
    let report = metrics::score(&items, &targets).stage()?;
    if let Some(out) = &a.out {
        let out = output(&Some(out.clone()), &None, "report")?;
        write_json(&out, &report)?;
        let mut m = Manifest::new("evaluate", ctx.seed)
            .input("outputs", &outputs_path)
            .stage()?;
        if let Some(p) = &targets_path {
            m = m.input("targets", p).stage()?;
        } else {
            m.inputs.insert(
                "targets".into(),
                sha256_hex(&serde_json::to_vec(&targets).expect("serializes")),
            );
        }
        m.output("report", &out)
            .stage()?
            .details(json!({"n_items": items.len()}))
            .write_for(&out)
            .stage()?;
    }
    if a.json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

#[derive(Serialize)]
struct BoundSummary {
    trials: usize,
    violations: usize,
    max_gap_at_posterior: f64,
    kl_mismatches: usize,
    passed: bool,
    models: Vec<BoundReport>,
}

pub fn verify_bound_cmd(ctx: &Env, a: &VerifyBoundArgs) -> Outcome {
    let models: Vec<ToyModel> = match &a.model {
        Some(p) => {
            let path = input(&Some(p.clone()), &None, "model")?;
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))
                .stage()?;
            let m: ToyModel = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .usage()?;
            m.validate().usage()?;
            vec![m]
        }
        None => reference_models(ctx.seed).stage()?,
    };
    let reports: Vec<BoundReport> = ctx
        .pool
        .install(|| {
            models
                .par_iter()
                .enumerate()
                .map(|(i, m)| verify_bound(m, a.trials, ctx.seed.wrapping_add(i as u64)))
                .collect::<Result<_, _>>()
        })
        .stage()?;
    let summary = BoundSummary {
        trials: reports.iter().map(|r| r.trials).sum(),
        violations: reports.iter().map(|r| r.violations).sum(),
        max_gap_at_posterior: reports
            .iter()
            .map(|r| r.max_gap_at_posterior)
            .fold(0.0, f64::max),
        kl_mismatches: reports.iter().map(|r| r.kl_mismatches).sum(),
        passed: reports.iter().all(BoundReport::passed),
        models: reports,
    };
    match &a.out {
        Some(out) => {
            let out = output(&Some(out.clone()), &None, "report")?;
            write_json(&out, &summary)?;
            let mut m = Manifest::new("verify-bound", ctx.seed);
            if let Some(p) = &a.model {
                m = m.input("model", p).stage()?;
            }
            m.output("report", &out)
                .stage()?
                .details(json!({"trials_per_model": a.trials}))
                .write_for(&out)
                .stage()?;
        }
        None => print_json(&summary)?,
    }
    if summary.passed {
        Ok(())
    } else {
        Err(Failure::Stage(anyhow!(
            "bound check failed: {} violations",
            summary.violations
        )))
    }
}

fn collect_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_manifests(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".manifest.json"))
        {
            out.push(path);
        }
    }
    Ok(())
}

pub fn report(ctx: &Env, a: &ReportArgs) -> Outcome {
    let mut found = Vec::new();
    for dir in &a.dir {
        if !dir.is_dir() {
            return Err(usage(format!("{} is not a directory", dir.display())));
        }
        collect_manifests(dir, &mut found)
            .with_context(|| format!("scanning {}", dir.display()))
            .stage()?;
    }
    found.sort();
    let artifacts = found
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let manifest: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(json!({"manifest": p.display().to_string(), "contents": manifest}))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .stage()?;
    let summary = json!({
        "tool_version": crate::manifest::TOOL_VERSION,
        "seed": ctx.seed,
        "n_artifacts": artifacts.len(),
        "artifacts": artifacts,
    });
    match &a.out {
        Some(out) => write_json(&output(&Some(out.clone()), &None, "report")?, &summary),
        None => print_json(&summary),
    }
}

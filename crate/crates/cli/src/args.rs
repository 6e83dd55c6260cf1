use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use persona_core::prior::SamplingMode;

#[derive(Debug, Parser)]
#[command(
    name = "persona",
    version,
    about = "Persona extraction and dataset pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config file (TOML); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output on stderr; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, scrub and subsample sessions, then write context/target pairs.
    Ingest(IngestArgs),
    /// Extract persona assignments for every pair.
    Extract(ExtractArgs),
    /// Count extracted values into an empirical prior.
    BuildPrior(BuildPriorArgs),
    /// Assemble a fine-tuning corpus for one variant.
    BuildDataset(BuildDatasetArgs),
    /// Score model outputs for catchphrase, emoji and hobby rates.
    Evaluate(EvaluateArgs),
    /// Check the variational bound on small enumerable models.
    VerifyBound(VerifyBoundArgs),
    /// Collect every manifest under the given directories into one summary.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    /// Pairs JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the cleaned, subsampled sessions here.
    #[arg(long)]
    pub sessions_out: Option<PathBuf>,
    #[arg(long)]
    pub cap_quantile: Option<f64>,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Extractions JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run free-text analysis and write it here.
    #[arg(long)]
    pub analyses_out: Option<PathBuf>,
    /// Write free-text analyses to `paths.analyses`.
    #[arg(long)]
    pub unstructured: bool,
    /// Use the offline rule-based backend.
    #[arg(long)]
    pub mock: bool,
    #[arg(long)]
    pub mock_rules: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_concurrent: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildPriorArgs {
    #[arg(long)]
    pub extractions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label stored in the prior file; defaults to the input file name.
    #[arg(long)]
    pub source: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// ft, p_ft, sp_ft or unstructured.
    #[arg(long)]
    pub variant: Option<String>,
    /// talking, interaction or personal; repeatable.
    #[arg(long)]
    pub exclude_axis: Vec<String>,
    #[arg(long, value_parser = parse_sampling)]
    pub sampling: Option<SamplingMode>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub extractions: Option<PathBuf>,
    #[arg(long)]
    pub analyses: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_sampling(s: &str) -> Result<SamplingMode, String> {
    match s {
        "frequency" => Ok(SamplingMode::Frequency),
        "uniform" => Ok(SamplingMode::Uniform),
        other => Err(format!(
            "unknown sampling mode {other:?} (frequency or uniform)"
        )),
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub outputs: Option<PathBuf>,
    /// Reference rates; the shipped human rates when omitted.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct VerifyBoundArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// A model JSON file; the built-in reference models when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true)]
    pub dir: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

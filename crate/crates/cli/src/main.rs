//! `exsel` — run similarity-based example-selection experiments for LLM
//! machine translation from a declarative JSON config.
//!
//! Each subcommand executes the pipeline up to and including its stage;
//! completed work is replayed from the on-disk caches, so running stages one
//! at a time and re-running a finished experiment are both cheap.
//!
//! Exit codes: 0 on full success, 1 on config/usage errors, 2 when the run
//! finished with per-item failures recorded in the manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exsel_core::harness::{
    compare_retrievers, load_summary, run::Stage, validate_config, ConfigError, RunManifest,
    Runner,
};

#[derive(Parser)]
#[command(name = "exsel", version, about = "Example selection experiments for LLM MT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load corpora and compose the selection pool.
    Ingest(StageArgs),
    /// Load or fetch embedding matrices for the configured retrievers.
    Embed(StageArgs),
    /// Rank pool pairs per query for every (retriever, k) setting.
    Retrieve(StageArgs),
    /// Assemble few-shot prompts from the selections.
    Prompt(StageArgs),
    /// Call the completion endpoint (cached) and post-process hypotheses.
    Generate(StageArgs),
    /// Compute BLEU, error categories, and gated scores.
    Evaluate(StageArgs),
    /// Produce the pool quality/diversity report.
    Analyze(StageArgs),
    /// Run the whole pipeline.
    Run(StageArgs),
    /// Compare retrievers across one or more finished runs.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the k grid to these values (must be a subset of the config).
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// One or more experiment configs whose finished runs to compare.
    #[arg(long, required = true, num_args = 1..)]
    config: Vec<PathBuf>,
    /// Metric column to compare: bleu, comet, or lacomet.
    #[arg(long, default_value = "bleu")]
    metric: String,
    /// Also write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_stage(args: &StageArgs, stage: Stage) -> anyhow::Result<ExitCode> {
    let mut config = match validate_config(&args.config) {
        Ok(config) => config,
        Err(err @ (ConfigError::Invalid(_) | ConfigError::Parse(_) | ConfigError::Io { .. })) => {
            eprintln!("{err}");
            return Ok(ExitCode::from(1));
        }
    };
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(ks) = &args.k {
        let unknown: Vec<usize> =
            ks.iter().copied().filter(|k| !config.k.contains(k)).collect();
        if !unknown.is_empty() {
            eprintln!("error: --k {unknown:?} not present in the config's k grid");
            return Ok(ExitCode::from(1));
        }
        config.k = ks.clone();
        config.k.sort_unstable();
        config.k.dedup();
    }
    let manifest = Runner::new(config).run_until(stage)?;
    report_outcome(&manifest)
}

fn report_outcome(manifest: &RunManifest) -> anyhow::Result<ExitCode> {
    for (stage, info) in &manifest.stages {
        println!("{stage}: {} artifact(s)", info.artifacts.len());
    }
    if manifest.errors.is_empty() {
        println!("ok ({} network requests)", manifest.network_requests);
        Ok(ExitCode::SUCCESS)
    } else {
        for err in &manifest.errors {
            eprintln!("item failed: {err}");
        }
        eprintln!("{} item(s) failed; partial results written", manifest.errors.len());
        Ok(ExitCode::from(2))
    }
}

fn run_report(args: &ReportArgs) -> anyhow::Result<ExitCode> {
    let mut summaries = Vec::new();
    for config_path in &args.config {
        let config = match validate_config(config_path) {
            Ok(c) => c,
            Err(err) => {
                eprintln!("{err}");
                return Ok(ExitCode::from(1));
            }
        };
        let summary_path = config.output_dir.join("metrics").join("summary.csv");
        summaries.push(load_summary(&summary_path)?);
    }
    let table = compare_retrievers(&summaries, &args.metric)?;
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, table.to_csv())?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Ingest(args) => run_stage(args, Stage::Ingest),
        Command::Embed(args) => run_stage(args, Stage::Embed),
        Command::Retrieve(args) => run_stage(args, Stage::Retrieve),
        Command::Prompt(args) => run_stage(args, Stage::Prompt),
        Command::Generate(args) => run_stage(args, Stage::Generate),
        Command::Evaluate(args) => run_stage(args, Stage::Evaluate),
        Command::Analyze(args) => run_stage(args, Stage::Analyze),
        Command::Run(args) => run_stage(args, Stage::Analyze),
        Command::Report(args) => run_report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

//! Command line front end for the feedback mining pipeline.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 input or
//! artifact error, 3 stage execution failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feedback_insight::corpus::{corpus_stats, load_corpus};
use feedback_insight::pipeline::{
    compare_methods, run_pipeline, run_stage, CompareMethod, PipelineConfig, PipelineError,
    StageName,
};

#[derive(Parser)]
#[command(
    name = "feedback-insight",
    version,
    about = "Mines customer feedback into main topics and labeled sub-topics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every pipeline stage in order.
    Run {
        /// Path to the pipeline configuration (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Rerun a single stage on top of existing artifacts.
    Stage {
        /// One of: ingest, embed, classify, pshti, label, eval, report.
        name: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Cluster each main-topic group with several methods and tabulate
    /// silhouette and coherence per method.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of: pshti_norm, pshti_unnorm, lda_only,
        /// embed_only. Defaults to the [compare] section of the config.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Print summary statistics for a feedback corpus without running
    /// the pipeline.
    Stats {
        /// Path to a feedback corpus (JSONL).
        #[arg(long)]
        corpus: PathBuf,
    },
}

/// `FEEDBACK_INSIGHT_SEED` overrides the configured seed for one invocation.
fn apply_seed_override(cfg: &mut PipelineConfig) -> Result<(), PipelineError> {
    match std::env::var("FEEDBACK_INSIGHT_SEED") {
        Ok(raw) => {
            let seed = raw.parse::<u64>().map_err(|_| {
                PipelineError::Config(format!(
                    "FEEDBACK_INSIGHT_SEED must be an unsigned integer, got {raw:?}"
                ))
            })?;
            log::info!("seed overridden to {seed} by FEEDBACK_INSIGHT_SEED");
            cfg.seed = seed;
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => Err(PipelineError::Config(
            "FEEDBACK_INSIGHT_SEED is not valid unicode".into(),
        )),
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(path)?;
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn parse_methods(
    raw: &[String],
    cfg: &PipelineConfig,
) -> Result<Vec<CompareMethod>, PipelineError> {
    let names: Vec<&str> = if raw.is_empty() {
        cfg.compare.methods.iter().map(|s| s.as_str()).collect()
    } else {
        raw.iter().map(|s| s.as_str()).collect()
    };
    names
        .iter()
        .map(|name| {
            CompareMethod::parse(name).ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown comparison method {name:?}; expected one of pshti_norm, \
                     pshti_unnorm, lda_only, embed_only"
                ))
            })
        })
        .collect()
}

fn print_stats(corpus: &Path) -> Result<(), PipelineError> {
    let records = load_corpus(corpus)
        .map_err(|e| PipelineError::Input(format!("corpus {}: {e}", corpus.display())))?;
    let stats = corpus_stats(&records, 20);
    println!("records: {}", stats.records);
    println!();
    println!("labels per feedback:");
    for (n, count) in &stats.labels_per_doc {
        println!("  {n:>3} labels  {count:>6}");
    }
    println!();
    println!("top labels:");
    for (label, count) in &stats.top_labels {
        println!("  {label:<30} {count:>6}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Run { config } => run_pipeline(&load_config(&config)?),
        Command::Stage { name, config } => {
            let stage = StageName::parse(&name).ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown stage {name:?}; expected one of ingest, embed, classify, \
                     pshti, label, eval, report"
                ))
            })?;
            run_stage(&load_config(&config)?, stage)
        }
        Command::Compare { config, methods } => {
            let cfg = load_config(&config)?;
            let parsed = parse_methods(&methods, &cfg)?;
            compare_methods(&cfg, &parsed)
        }
        Command::Stats { corpus } => print_stats(&corpus),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}

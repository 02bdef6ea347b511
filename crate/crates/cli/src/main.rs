//! `privrec`: ingest catalogs, train the sensitivity classifier, build the
//! retrieval index, run recommendation experiments and report metrics.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use privrec_core::catalog::{DEFAULT_MIN_ITEMS, DEFAULT_WINDOW};
use privrec_core::retrieval::{ProviderConfig, ProviderKind, DEFAULT_DIMENSION};
use privrec_core::sensitivity::{DEFAULT_GAMMA, RECALL_PRIORITY_THRESHOLD};
use tracing::Level;

use commands::{ensure_parent, CommandOutcome, IngestArgs, RunArgs, TrainArgs};
use error::{CliError, EXIT_USAGE};

const CONFIG_KEYS: &str = "\
Run config keys (TOML):
  scheme                 baseline | only_local | cat_obf_only | cat_obf_deobf | bert_obf_only | bert_obf_deobf
  n_total                recommendations per user (default 10)
  seed                   dispatch-order seed (default 0)
  parallelism            concurrent users (default 4)
  failure_cap            tolerated fraction of failed users (default 0.05)
  query                  optional user query placed before the history
  reprompt_on_shortfall  retry a leg once when it returns too few items
  run_id                 defaults to <scheme>-<config hash prefix>
  [scorer]               kind (categorical | trained | remote), threshold, sensitive_categories,
                         model_path, endpoint, timeout_secs
  [server_backend], [local_backend]
                         kind (remote_api | local_endpoint | mock_retrieval | mock_scripted),
                         base_url, model_name, auth_token_env (name of the variable holding the token),
                         timeout_secs, max_output_items, script, fixture, same_category
  [embedding]            kind (deterministic_hash | remote_endpoint), dimension, endpoint, timeout_secs";

#[derive(Parser)]
#[command(name = "privrec", version, about = "Privacy-preserving LLM recommendation pipeline", after_help = CONFIG_KEYS)]
struct Cli {
    /// Run config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training shuffles and run dispatch order; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: Level,
    /// Concurrent users during `run`; overrides the config.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a catalog and purchase histories from line-delimited records.
    Ingest {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_ITEMS)]
        min_items: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Stop reading metadata after this many valid records.
        #[arg(long)]
        max_records: Option<usize>,
        /// `{product_id, label}` lines with label sensitive or nonsensitive.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// `{product_id, score}` lines with scores in [0, 1].
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the focal-loss sensitivity classifier.
    TrainClassifier {
        /// `{product_id, label}` lines.
        #[arg(long)]
        labels: PathBuf,
        /// Archive whose products the labels refer to.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = RECALL_PRIORITY_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every catalog product with a trained classifier.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Defaults to the threshold stored in the model.
        #[arg(long)]
        threshold: Option<f64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed the catalog and write the retrieval index.
    BuildIndex {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DIMENSION)]
        dimension: usize,
        /// Remote embedding service; the deterministic hash embedding is used when absent.
        #[arg(long)]
        embed_endpoint: Option<url::Url>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment and write its run archive.
    Run {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate run archives against a baseline run and write report files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle suites.
    Selfcheck,
}

fn dispatch(cli: Cli) -> Result<CommandOutcome, CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Ingest { metadata, interactions, min_items, window, max_records, labels, scores, out } => {
            ensure_parent(&out)?;
            commands::ingest(IngestArgs {
                metadata: &metadata,
                interactions: &interactions,
                min_items,
                window,
                max_records,
                labels: labels.as_deref(),
                scores: scores.as_deref(),
                out: &out,
            })
        }
        Command::TrainClassifier { labels, catalog, gamma, threshold, learning_rate, epochs, batch_size, weight_decay, out } => {
            ensure_parent(&out)?;
            commands::train(TrainArgs {
                labels: &labels,
                catalog: &catalog,
                gamma,
                threshold,
                seed: seed.unwrap_or(0),
                learning_rate,
                epochs,
                batch_size,
                weight_decay,
                out: &out,
            })
        }
        Command::Classify { model, catalog, threshold, out } => commands::classify(&model, &catalog, threshold, out.as_deref()),
        Command::BuildIndex { catalog, dimension, embed_endpoint, out } => {
            ensure_parent(&out)?;
            let kind = if embed_endpoint.is_some() { ProviderKind::RemoteEndpoint } else { ProviderKind::DeterministicHash };
            let provider = ProviderConfig { kind, dimension, endpoint: embed_endpoint, ..ProviderConfig::default() };
            commands::build_index_cmd(&catalog, &provider, &out)
        }
        Command::Run { catalog, index, out } => commands::run(RunArgs {
            config: cli.config.as_deref(),
            catalog: &catalog,
            index: &index,
            out: &out,
            seed,
            parallelism: cli.parallelism,
        }),
        Command::Report { runs, baseline, out } => commands::report(&runs, &baseline, &out),
        Command::Selfcheck => commands::selfcheck(seed.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    tracing_subscriber::fmt().with_max_level(cli.log_level).with_writer(std::io::stderr).with_target(false).init();
    match dispatch(cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary.trim_end());
            for p in &outcome.artifact_paths {
                println!("wrote {}", p.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

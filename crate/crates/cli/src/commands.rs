use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use privrec_core::catalog::{
    apply_labels, apply_scores, build_histories, ingest_interactions, ingest_metadata, Archive, IngestLimits, ProductText,
};
use privrec_core::evaluation::{build_report, render_text, write_report};
use privrec_core::pipeline::{load_run, run_experiment, write_run, PipelineError, RunContext};
use privrec_core::retrieval::{build_index, EmbeddingProvider, ProviderConfig, ProviderKind, VectorIndex};
use privrec_core::selfcheck::run_selfcheck;
use privrec_core::sensitivity::{train_classifier, TrainConfig, TrainHyper, TrainedClassifier};
use serde::Serialize;

use crate::config::load_run_file;
use crate::error::{CliError, EXIT_OK};

#[derive(Debug, Clone, Default)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub artifact_paths: Vec<PathBuf>,
}

impl CommandOutcome {
    fn ok(summary: impl Into<String>, artifact_paths: Vec<PathBuf>) -> Self {
        Self { exit_code: EXIT_OK, summary: summary.into(), artifact_paths }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(CliError::from)
}

pub struct IngestArgs<'a> {
    pub metadata: &'a Path,
    pub interactions: &'a Path,
    pub min_items: usize,
    pub window: usize,
    pub max_records: Option<usize>,
    pub labels: Option<&'a Path>,
    pub scores: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn ingest(a: IngestArgs) -> Result<CommandOutcome, CliError> {
    let (mut catalog, report) = ingest_metadata(open(a.metadata)?, IngestLimits { max_records: a.max_records })?;
    if let Some(p) = a.labels {
        let n = apply_labels(&mut catalog, open(p)?)?;
        tracing::info!(applied = n, "applied sensitivity labels");
    }
    if let Some(p) = a.scores {
        let n = apply_scores(&mut catalog, open(p)?)?;
        tracing::info!(applied = n, "applied sensitivity scores");
    }
    let interactions = ingest_interactions(open(a.interactions)?)?;
    let built = build_histories(&interactions, &catalog, a.min_items, a.window)?;
    tracing::info!(
        dropped_unresolved = built.dropped_unresolved,
        collapsed_repeats = built.collapsed_repeats,
        below_threshold = built.users_below_threshold,
        "built histories"
    );
    let archive = Archive { catalog, histories: built.histories, ingest: report.clone() };
    archive.save(a.out)?;
    Ok(CommandOutcome::ok(
        format!(
            "catalog: {} products ({} malformed, {} duplicate ids); {} histories",
            report.accepted,
            report.skipped_malformed,
            report.duplicate_ids,
            archive.histories.len()
        ),
        vec![a.out.to_path_buf()],
    ))
}

pub struct TrainArgs<'a> {
    pub labels: &'a Path,
    pub catalog: &'a Path,
    pub gamma: f64,
    pub threshold: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub out: &'a Path,
}

pub fn train(a: TrainArgs) -> Result<CommandOutcome, CliError> {
    let mut archive = Archive::load(a.catalog)?;
    apply_labels(&mut archive.catalog, open(a.labels)?)?;
    let labeled: Vec<(ProductText, bool)> = archive
        .catalog
        .products()
        .filter_map(|p| p.ground_truth_sensitive.map(|l| (p.canonical_text(), l)))
        .collect();
    let cfg = TrainConfig {
        gamma: a.gamma,
        threshold: a.threshold,
        hyper: TrainHyper {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: a.batch_size,
            weight_decay: a.weight_decay,
            seed: a.seed,
        },
        ..TrainConfig::default()
    };
    let outcome = train_classifier(&labeled, &cfg)?;
    outcome.classifier.save(a.out)?;
    let v = &outcome.validation;
    let (tr, va, te) = outcome.split_sizes;
    Ok(CommandOutcome::ok(
        format!(
            "trained on {tr}/{va}/{te} (train/val/test) labeled products; validation F1 {:.4}, precision {:.4}, recall {:.4}",
            v.f1, v.precision, v.recall
        ),
        vec![a.out.to_path_buf()],
    ))
}

#[derive(Serialize)]
struct ClassifyLine<'a> {
    product_id: &'a str,
    probability: f64,
    sensitive: bool,
}

pub fn classify(model: &Path, catalog: &Path, threshold: Option<f64>, out: Option<&Path>) -> Result<CommandOutcome, CliError> {
    let model = TrainedClassifier::load(model)?;
    let threshold = threshold.unwrap_or(model.threshold());
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let archive = Archive::load(catalog)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut flagged = 0;
    for p in archive.catalog.products() {
        let probability = model.probability(p.canonical_text().as_str());
        let sensitive = probability >= threshold;
        flagged += usize::from(sensitive);
        let line = ClassifyLine { product_id: &p.id, probability, sensitive };
        writeln!(sink, "{}", serde_json::to_string(&line).map_err(|e| CliError::Failed(e.to_string()))?)?;
    }
    sink.flush()?;
    Ok(CommandOutcome::ok(
        format!("{flagged} of {} products flagged sensitive at threshold {threshold}", archive.catalog.len()),
        out.map(|p| vec![p.to_path_buf()]).unwrap_or_default(),
    ))
}

pub fn build_index_cmd(catalog: &Path, provider: &ProviderConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    let archive = Archive::load(catalog)?;
    let provider = EmbeddingProvider::from_config(provider)?;
    let index = runtime()?.block_on(build_index(&archive.catalog, &provider))?;
    index.save(out)?;
    Ok(CommandOutcome::ok(
        format!("indexed {} products with {}", index.len(), provider.identity()),
        vec![out.to_path_buf()],
    ))
}

pub struct RunArgs<'a> {
    pub config: Option<&'a Path>,
    pub catalog: &'a Path,
    pub index: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
}

pub fn run(a: RunArgs) -> Result<CommandOutcome, CliError> {
    let path = a.config.ok_or_else(|| CliError::Config("run requires --config".into()))?;
    let mut file = load_run_file(path)?;
    if let Some(seed) = a.seed {
        file.experiment.seed = seed;
    }
    if let Some(p) = a.parallelism {
        file.experiment.parallelism = p;
    }
    file.experiment.validate()?;
    let archive = Archive::load(a.catalog)?;
    let index = VectorIndex::load(a.index)?;
    let provider_cfg = file.embedding.clone().unwrap_or(ProviderConfig {
        kind: ProviderKind::DeterministicHash,
        dimension: index.dimension(),
        ..ProviderConfig::default()
    });
    let provider = EmbeddingProvider::from_config(&provider_cfg)?;
    let ctx = RunContext::from_config(file.experiment, Arc::new(archive.catalog), Arc::new(index), provider)?;
    tracing::info!(run_id = %ctx.config.effective_run_id(), users = archive.histories.len(), "starting run");
    let result = runtime()?.block_on(run_experiment(&ctx, &archive.histories));
    match result {
        Ok(output) => {
            let paths = write_run(a.out, &output)?;
            let m = &output.manifest;
            Ok(CommandOutcome::ok(
                format!("run {}: {} users, {} failed", m.run_id, m.users, m.failed_users),
                paths,
            ))
        }
        Err(PipelineError::FailureCapExceeded { failed, total, output }) => {
            write_run(a.out, &output)?;
            Err(CliError::Failed(format!("{failed} of {total} users failed, above the configured cap; partial run written")))
        }
        Err(PipelineError::BackendUnreachable { failed, total, output }) => {
            write_run(a.out, &output)?;
            Err(CliError::Unreachable(format!("all {failed} of {total} users failed with transport errors")))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn report(runs: &[PathBuf], baseline: &str, out: &Path) -> Result<CommandOutcome, CliError> {
    let archives = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let report = build_report(&archives, baseline)?;
    let paths = write_report(out, &report, &archives)?;
    Ok(CommandOutcome::ok(render_text(&report), paths))
}

pub fn selfcheck(seed: u64) -> Result<CommandOutcome, CliError> {
    let results = run_selfcheck(seed);
    let lines: Vec<String> = results
        .iter()
        .map(|c| format!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect();
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{}\n{failed} check(s) failed", lines.join("\n"))));
    }
    Ok(CommandOutcome::ok(lines.join("\n"), Vec::new()))
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

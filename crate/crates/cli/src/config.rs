use std::fs;
use std::path::Path;

use privrec_core::pipeline::ExperimentConfig;
use privrec_core::retrieval::ProviderConfig;
use serde::Deserialize;

use crate::error::CliError;

/// A run config file: the experiment keys at top level plus an optional
/// `[embedding]` table.
#[derive(Debug, Clone)]
pub struct RunFile {
    pub experiment: ExperimentConfig,
    pub embedding: Option<ProviderConfig>,
}

pub fn load_run_file(path: &Path) -> Result<RunFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    parse_run_file(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_run_file(text: &str) -> Result<RunFile, String> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
    let embedding = match table.remove("embedding") {
        None => None,
        Some(v) => Some(ProviderConfig::deserialize(v).map_err(|e| format!("[embedding]: {}", e.message()))?),
    };
    let experiment = ExperimentConfig::deserialize(toml::Value::Table(table)).map_err(|e| e.message().to_string())?;
    Ok(RunFile { experiment, embedding })
}

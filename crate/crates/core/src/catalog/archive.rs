use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ingest::parse_label;
use super::{Catalog, CatalogError, IngestReport, PurchaseHistory};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HistoryRef {
    user_id: String,
    items: Vec<String>,
    target: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveFile {
    format_version: u32,
    ingest: IngestReport,
    catalog: Catalog,
    histories: Vec<HistoryRef>,
}

/// A catalog together with the histories built over it. Histories are stored
/// as id references and re-resolved on load.
#[derive(Debug, Clone)]
pub struct Archive {
    pub catalog: Catalog,
    pub histories: Vec<PurchaseHistory>,
    pub ingest: IngestReport,
}

impl Archive {
    pub fn save(&self, path: &Path) -> Result<(), CatalogError> {
        let file = ArchiveFile {
            format_version: ARCHIVE_FORMAT_VERSION,
            ingest: self.ingest.clone(),
            catalog: self.catalog.clone(),
            histories: self
                .histories
                .iter()
                .map(|h| HistoryRef {
                    user_id: h.user_id.clone(),
                    items: h.items.iter().map(|p| p.id.clone()).collect(),
                    target: h.target.id.clone(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file).map_err(|e| CatalogError::Archive(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let file: ArchiveFile = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| CatalogError::Archive(format!("{}: {e}", path.display())))?;
        if file.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(CatalogError::Archive(format!("unsupported archive version {}", file.format_version)));
        }
        let catalog = file.catalog;
        let resolve = |id: &str| {
            catalog
                .get(id)
                .cloned()
                .ok_or_else(|| CatalogError::Archive(format!("history references unknown product {id}")))
        };
        let histories = file
            .histories
            .iter()
            .map(|h| {
                Ok(PurchaseHistory {
                    user_id: h.user_id.clone(),
                    items: h.items.iter().map(|id| resolve(id)).collect::<Result<_, _>>()?,
                    target: resolve(&h.target)?,
                })
            })
            .collect::<Result<Vec<_>, CatalogError>>()?;
        Ok(Self { catalog, histories, ingest: file.ingest })
    }

    /// Copies the catalog's current annotations into the history snapshots.
    pub fn refresh_histories(&mut self) {
        for h in &mut self.histories {
            for p in h.items.iter_mut().chain(std::iter::once(&mut h.target)) {
                if let Some(fresh) = self.catalog.get(&p.id) {
                    *p = fresh.clone();
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct LabelLine {
    product_id: String,
    label: String,
}

#[derive(Deserialize)]
struct ScoreLine {
    product_id: String,
    score: f64,
}

/// Applies `{product_id, label}` lines (`sensitive` / `nonsensitive`).
/// Returns the number of products annotated; unknown ids are ignored.
pub fn apply_labels<R: BufRead>(catalog: &mut Catalog, source: R) -> Result<usize, CatalogError> {
    let mut applied = 0;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelLine =
            serde_json::from_str(&line).map_err(|e| CatalogError::Record { line: i + 1, message: e.to_string() })?;
        let label = parse_label(&rec.label)
            .ok_or_else(|| CatalogError::Record { line: i + 1, message: format!("unknown label {:?}", rec.label) })?;
        if let Some(p) = catalog.get_mut(&rec.product_id) {
            p.ground_truth_sensitive = Some(label);
            applied += 1;
        }
    }
    Ok(applied)
}

/// Applies `{product_id, score}` lines; scores must lie in [0,1].
pub fn apply_scores<R: BufRead>(catalog: &mut Catalog, source: R) -> Result<usize, CatalogError> {
    let mut applied = 0;
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreLine =
            serde_json::from_str(&line).map_err(|e| CatalogError::Record { line: i + 1, message: e.to_string() })?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(CatalogError::Record { line: i + 1, message: format!("score {} outside [0,1]", rec.score) });
        }
        if let Some(p) = catalog.get_mut(&rec.product_id) {
            p.sensitivity_score = Some(rec.score);
            applied += 1;
        }
    }
    Ok(applied)
}

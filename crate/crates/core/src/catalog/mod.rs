//! Product catalog and purchase-history construction.
//!
//! Products arrive as line-delimited JSON metadata records (the layout of the
//! public Amazon review metadata dumps). Interactions arrive as a second
//! line-delimited stream of `{user_id, item_id, timestamp}` records and are
//! folded into fixed-length [`PurchaseHistory`] windows.

mod archive;
mod history;
mod ingest;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use archive::{apply_labels, apply_scores, Archive, ARCHIVE_FORMAT_VERSION};
pub use history::{build_histories, HistoryBuild, DEFAULT_MIN_ITEMS, DEFAULT_WINDOW};
pub use ingest::{ingest_interactions, ingest_metadata, IngestLimits, IngestReport, Interaction, Interactions};

/// Errors raised while ingesting or assembling catalog data.
#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no valid records in input ({skipped} malformed lines skipped)")]
    Empty { skipped: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

/// One catalog item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub main_category: String,
    pub title: String,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub description: Vec<String>,
    #[serde(default)]
    pub details: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_sensitive: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity_score: Option<f64>,
}

impl Product {
    pub fn new(id: impl Into<String>, main_category: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            main_category: main_category.into(),
            title: title.into(),
            features: Vec::new(),
            description: Vec::new(),
            details: BTreeMap::new(),
            ground_truth_sensitive: None,
            sensitivity_score: None,
        }
    }

    pub fn canonical_text(&self) -> ProductText {
        canonical_text(self)
    }
}

/// Canonical textual view of a product, used for classification, prompting
/// and embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductText(pub String);

impl ProductText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The text with line breaks folded, for embedding in one-item-per-line lists.
    pub fn single_line(&self) -> String {
        self.0.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ")
    }
}

impl fmt::Display for ProductText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Renders Title, Main Category, Features and Description, one labelled
/// section per line, in that order.
pub fn canonical_text(p: &Product) -> ProductText {
    ProductText(format!(
        "Title: {}\nMain Category: {}\nFeatures: {}\nDescription: {}",
        p.title.trim(),
        p.main_category.trim(),
        join_trimmed(&p.features, "; "),
        join_trimmed(&p.description, " "),
    ))
}

fn join_trimmed(parts: &[String], sep: &str) -> String {
    parts.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(sep)
}

/// Lowercase hex SHA-256 of the canonical text.
pub fn synthetic_id(p: &Product) -> String {
    hex::encode(Sha256::digest(canonical_text(p).0.as_bytes()))
}

/// An ordered purchase window plus the held-out next purchase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurchaseHistory {
    pub user_id: String,
    /// Oldest first.
    pub items: Vec<Product>,
    pub target: Product,
}

/// Id-indexed, immutable product collection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    products: BTreeMap<String, Product>,
    category_universe: Vec<String>,
}

impl Catalog {
    /// Builds a catalog from products; later duplicates of an id are dropped
    /// and returned.
    pub fn from_products(products: impl IntoIterator<Item = Product>) -> (Self, Vec<Product>) {
        let mut map = BTreeMap::new();
        let mut dupes = Vec::new();
        for p in products {
            if map.contains_key(&p.id) {
                dupes.push(p);
            } else {
                map.insert(p.id.clone(), p);
            }
        }
        let mut catalog = Self { products: map, category_universe: Vec::new() };
        catalog.refresh_universe();
        (catalog, dupes)
    }

    fn refresh_universe(&mut self) {
        let mut cats: Vec<String> = self.products.values().map(|p| p.main_category.clone()).collect();
        cats.sort();
        cats.dedup();
        self.category_universe = cats;
    }

    pub fn get(&self, id: &str) -> Option<&Product> {
        self.products.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Product> {
        self.products.get_mut(id)
    }

    /// Products in ascending id order.
    pub fn products(&self) -> impl ExactSizeIterator<Item = &Product> {
        self.products.values()
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Distinct main categories, lexicographically ordered.
    pub fn category_universe(&self) -> &[String] {
        &self.category_universe
    }

    /// SHA-256 over the serialized products, for run manifests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.products.values() {
            let line = serde_json::to_vec(p).expect("product serializes");
            hasher.update(&line);
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{synthetic_id, Catalog, CatalogError, Product};

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestLimits {
    /// Stop after this many valid records.
    pub max_records: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub skipped_malformed: usize,
    pub duplicate_ids: usize,
    pub synthetic_ids: usize,
}

/// Reads line-delimited metadata records into a [`Catalog`].
///
/// Malformed lines (not a JSON object, no usable title, out-of-range score)
/// are counted and skipped. Unknown keys are ignored.
pub fn ingest_metadata<R: BufRead>(source: R, limits: IngestLimits) -> Result<(Catalog, IngestReport), CatalogError> {
    let mut report = IngestReport::default();
    let mut products = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if limits.max_records.is_some_and(|cap| products.len() >= cap) {
            break;
        }
        match parse_product(&line) {
            Ok((product, synthetic)) => {
                report.synthetic_ids += usize::from(synthetic);
                products.push(product);
            }
            Err(reason) => {
                tracing::debug!(line = lineno + 1, %reason, "skipping malformed metadata record");
                report.skipped_malformed += 1;
            }
        }
    }
    if products.is_empty() {
        return Err(CatalogError::Empty { skipped: report.skipped_malformed });
    }
    let (catalog, dupes) = Catalog::from_products(products);
    report.duplicate_ids = dupes.len();
    report.accepted = catalog.len();
    Ok((catalog, report))
}

fn parse_product(line: &str) -> Result<(Product, bool), String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not an object")?;

    let title = string_field(obj, "title").ok_or("missing title")?;
    if title.trim().is_empty() {
        return Err("empty title".into());
    }
    let main_category = string_field(obj, "main_category")
        .filter(|c| !c.trim().is_empty())
        .unwrap_or_else(|| "Unknown".to_string());

    let mut product = Product::new(String::new(), main_category.trim(), title.trim());
    product.features = string_list(obj.get("features"));
    product.description = string_list(obj.get("description"));
    if let Some(Value::Object(details)) = obj.get("details") {
        product.details = details
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), v)
            })
            .collect();
    }

    product.ground_truth_sensitive = match obj.get("ground_truth_sensitive").or_else(|| obj.get("label")) {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(Value::String(s)) => Some(parse_label(s).ok_or_else(|| format!("unknown label {s:?}"))?),
        Some(other) => return Err(format!("unsupported label value {other}")),
    };
    product.sensitivity_score = match obj.get("sensitivity_score") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let s = v.as_f64().ok_or("sensitivity_score is not a number")?;
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("sensitivity_score {s} outside [0,1]"));
            }
            Some(s)
        }
    };

    let explicit = ["parent_asin", "id", "asin"]
        .iter()
        .find_map(|k| string_field(obj, k))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let synthetic = explicit.is_none();
    product.id = match explicit {
        Some(id) => id,
        None => synthetic_id(&product),
    };
    Ok((product, synthetic))
}

pub(crate) fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sensitive" => Some(true),
        "nonsensitive" => Some(false),
        _ => None,
    }
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Normalizes a string-or-list field to a list of nonempty strings.
fn string_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|i| i.as_str())
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .collect(),
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    #[serde(alias = "parent_asin", alias = "asin")]
    pub item_id: String,
    pub timestamp: i64,
}

/// Per-user interaction sequences, each sorted by timestamp with ties kept in
/// input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interactions {
    pub per_user: BTreeMap<String, Vec<Interaction>>,
    pub skipped_malformed: usize,
}

impl Interactions {
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut per_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for r in records {
            per_user.entry(r.user_id.clone()).or_default().push(r);
        }
        for seq in per_user.values_mut() {
            // Stable: equal timestamps keep input order.
            seq.sort_by_key(|r| r.timestamp);
        }
        Self { per_user, skipped_malformed: 0 }
    }
}

/// Reads `{user_id, item_id, timestamp}` lines. `parent_asin`/`asin` are
/// accepted in place of `item_id`, and numeric strings for `timestamp`.
pub fn ingest_interactions<R: BufRead>(source: R) -> Result<Interactions, CatalogError> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_interaction(&line) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    let mut out = Interactions::from_records(records);
    out.skipped_malformed = skipped;
    Ok(out)
}

fn parse_interaction(line: &str) -> Option<Interaction> {
    let value: Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    let user_id = string_field(obj, "user_id")?;
    let item_id = ["item_id", "parent_asin", "asin"].iter().find_map(|k| string_field(obj, k))?;
    let timestamp = match obj.get("timestamp")? {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64))?,
        Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    };
    if user_id.is_empty() || item_id.is_empty() {
        return None;
    }
    Some(Interaction { user_id, item_id, timestamp })
}

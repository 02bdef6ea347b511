use std::collections::HashSet;

use super::{Catalog, CatalogError, Interactions, PurchaseHistory};

pub const DEFAULT_MIN_ITEMS: usize = 30;
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Debug, Clone, Default)]
pub struct HistoryBuild {
    pub histories: Vec<PurchaseHistory>,
    /// Interactions whose item id is not in the catalog.
    pub dropped_unresolved: usize,
    /// Earlier repeat purchases collapsed into their latest occurrence.
    pub collapsed_repeats: usize,
    pub users_below_threshold: usize,
}

/// Emits one history per user with at least `min_items` resolvable, distinct
/// purchases: the last `window + 1` purchases, of which the final one is the
/// target.
///
/// A product bought more than once keeps only its most recent position, so the
/// target never reappears among the items.
pub fn build_histories(
    interactions: &Interactions,
    catalog: &Catalog,
    min_items: usize,
    window: usize,
) -> Result<HistoryBuild, CatalogError> {
    if window == 0 {
        return Err(CatalogError::Config("window must be at least 1".into()));
    }
    if window >= min_items {
        return Err(CatalogError::Config(format!(
            "window ({window}) must be smaller than min_items ({min_items})"
        )));
    }
    let mut out = HistoryBuild::default();
    for (user_id, seq) in &interactions.per_user {
        let resolved: Vec<&str> = seq
            .iter()
            .map(|r| r.item_id.as_str())
            .filter(|id| {
                let hit = catalog.get(id).is_some();
                if !hit {
                    out.dropped_unresolved += 1;
                }
                hit
            })
            .collect();

        let mut seen = HashSet::new();
        let mut distinct: Vec<&str> = resolved.iter().rev().copied().filter(|id| seen.insert(*id)).collect();
        distinct.reverse();
        out.collapsed_repeats += resolved.len() - distinct.len();

        if distinct.len() < min_items {
            out.users_below_threshold += 1;
            continue;
        }
        let tail = &distinct[distinct.len() - (window + 1)..];
        let lookup = |id: &str| catalog.get(id).cloned().expect("resolved above");
        out.histories.push(PurchaseHistory {
            user_id: user_id.clone(),
            items: tail[..window].iter().map(|id| lookup(id)).collect(),
            target: lookup(tail[window]),
        });
    }
    Ok(out)
}

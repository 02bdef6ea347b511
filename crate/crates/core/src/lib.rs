//! Privacy-preserving LLM recommendation pipeline and evaluation harness.
//!
//! Purchase histories are split into sensitive and nonsensitive parts by a
//! sensitivity scorer. Only the nonsensitive part is sent to a remote
//! recommender; the sensitive part is handled by a local model. The two
//! recommendation lists are concatenated and scored for utility and privacy
//! leakage.

pub mod catalog;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod retrieval;
pub mod selfcheck;
pub mod sensitivity;

use url::Url;

/// Appends `/`-separated path segments to a base URL, keeping any path prefix.
pub(crate) fn join_endpoint(base: &Url, path: &str) -> Url {
    let mut url = base.clone();
    if let Ok(mut segs) = url.path_segments_mut() {
        segs.pop_if_empty();
        segs.extend(path.split('/').filter(|s| !s.is_empty()));
    }
    url
}

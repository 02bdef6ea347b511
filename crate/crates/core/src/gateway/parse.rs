use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationEntry {
    pub rank: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedList {
    pub entries: Vec<RecommendationEntry>,
    /// Entries missing relative to the requested count.
    pub shortfall: usize,
    /// Entries dropped because the response listed more than requested.
    pub surplus: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no numbered entries in response")]
pub struct ParseError {
    pub raw: String,
}

fn line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.):]\s*(.*\S)\s*$").expect("valid pattern"))
}

/// Extracts `N. text`, `N) text` or `N: text` lines, renumbering from 1.
/// Never invents entries; a short list is reported through `shortfall`.
pub fn parse_numbered_list(raw: &str, expected: usize) -> Result<ParsedList, ParseError> {
    let texts: Vec<String> = raw
        .lines()
        .filter_map(|line| line_pattern().captures(line))
        .map(|c| c[2].trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if texts.is_empty() {
        return Err(ParseError { raw: raw.to_string() });
    }
    let surplus = texts.len().saturating_sub(expected);
    let entries: Vec<RecommendationEntry> = texts
        .into_iter()
        .take(expected.max(1))
        .enumerate()
        .map(|(i, text)| RecommendationEntry { rank: i + 1, text })
        .collect();
    let shortfall = expected.saturating_sub(entries.len());
    Ok(ParsedList { entries, shortfall, surplus })
}

/// Renders texts as `1. a\n2. b`.
pub fn format_numbered_list<S: AsRef<str>>(texts: &[S]) -> String {
    texts.iter().enumerate().map(|(i, t)| format!("{}. {}", i + 1, t.as_ref())).collect::<Vec<_>>().join("\n")
}

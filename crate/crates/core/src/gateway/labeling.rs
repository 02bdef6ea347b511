use std::collections::BTreeMap;

use super::prompt::{PromptTemplate, TemplateError};
use super::{complete, BackendError, ChatClient, ChatRequest};
use crate::catalog::ProductText;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unrecognized label response {0:?}")]
    Label(String),
    #[error("unrecognized score response {0:?}")]
    Score(String),
}

fn strip_wrapping(raw: &str) -> &str {
    raw.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`')).trim()
}

/// Accepts exactly `sensitive` or `nonsensitive`, ignoring case, surrounding
/// whitespace and quotes.
pub fn parse_label(raw: &str) -> Result<bool, LabelError> {
    match strip_wrapping(raw).to_ascii_lowercase().as_str() {
        "sensitive" => Ok(true),
        "nonsensitive" => Ok(false),
        _ => Err(LabelError::Label(raw.to_string())),
    }
}

/// Accepts a single decimal number in [0, 1].
pub fn parse_score(raw: &str) -> Result<f64, LabelError> {
    let s = strip_wrapping(raw);
    let well_formed = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_digit() || c == '.')
        && s.chars().filter(|&c| c == '.').count() <= 1
        && s.chars().any(|c| c.is_ascii_digit());
    match s.parse::<f64>() {
        Ok(v) if well_formed && (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(LabelError::Score(raw.to_string())),
    }
}

async fn ask(client: &dyn ChatClient, t: &PromptTemplate, product: &ProductText) -> Result<String, LabelError> {
    let rendered = t.render(&BTreeMap::from([("product", product.0.clone())]))?;
    let req = ChatRequest { system: rendered.system, user: rendered.user, count: 1, history: vec![product.clone()] };
    Ok(complete(client, &req).await?.text)
}

pub async fn assign_label_via_llm(client: &dyn ChatClient, product: &ProductText) -> Result<bool, LabelError> {
    parse_label(&ask(client, &PromptTemplate::sensitivity_label(), product).await?)
}

pub async fn assign_score_via_llm(client: &dyn ChatClient, product: &ProductText) -> Result<f64, LabelError> {
    parse_score(&ask(client, &PromptTemplate::sensitivity_score(), product).await?)
}

//! Prompt templates and their rendering.
//!
//! Templates are versioned text assets with a `[system]` and a `[user]`
//! section. Placeholders are `{name}` with `name` in `[a-z_]`; every
//! placeholder must be bound at render time. Substituted values are never
//! rescanned, so product text containing braces is inserted verbatim.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::ProductText;

pub const TEMPLATE_VERSION: u32 = 1;

const SERVER_RECOMMENDATION: &str = include_str!("../../assets/prompts/v1/server_recommendation.txt");
const LOCAL_DEOBFUSCATION: &str = include_str!("../../assets/prompts/v1/local_deobfuscation.txt");
const SENSITIVITY_LABEL: &str = include_str!("../../assets/prompts/v1/sensitivity_label.txt");
const SENSITIVITY_SCORE: &str = include_str!("../../assets/prompts/v1/sensitivity_score.txt");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unbound placeholder {{{0}}}")]
    Unbound(String),
    #[error("malformed template asset: {0}")]
    Malformed(String),
    #[error("invalid render input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub system_text: String,
    pub user_text_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Parses an asset with `[system]` / `[user]` section markers.
    pub fn parse(name: &str, asset: &str) -> Result<Self, TemplateError> {
        let asset = asset.replace("\r\n", "\n");
        let body = asset
            .strip_prefix("[system]\n")
            .ok_or_else(|| TemplateError::Malformed(format!("{name}: missing [system] header")))?;
        let (system, user) = body
            .split_once("\n[user]\n")
            .ok_or_else(|| TemplateError::Malformed(format!("{name}: missing [user] section")))?;
        Ok(Self {
            name: name.to_string(),
            version: TEMPLATE_VERSION,
            system_text: system.trim_end().to_string(),
            user_text_template: user.trim_end().to_string(),
        })
    }

    fn builtin(name: &str, asset: &str) -> Self {
        Self::parse(name, asset).expect("bundled template assets are well-formed")
    }

    /// Server-side recommender prompt over the nonsensitive history.
    pub fn server_recommendation() -> Self {
        Self::builtin("server_recommendation", SERVER_RECOMMENDATION)
    }

    /// On-device recommender prompt over the sensitive history.
    pub fn local_deobfuscation() -> Self {
        Self::builtin("local_deobfuscation", LOCAL_DEOBFUSCATION)
    }

    /// Few-shot sensitive/nonsensitive labeling prompt.
    pub fn sensitivity_label() -> Self {
        Self::builtin("sensitivity_label", SENSITIVITY_LABEL)
    }

    /// Few-shot 0..1 sensitivity scoring prompt.
    pub fn sensitivity_score() -> Self {
        Self::builtin("sensitivity_score", SENSITIVITY_SCORE)
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<RenderedPrompt, TemplateError> {
        Ok(RenderedPrompt { system: substitute(&self.system_text, vars)?, user: substitute(&self.user_text_template, vars)? })
    }
}

fn substitute(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')).unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = vars.get(name).ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// History as a numbered list, one item per line, in the given order.
pub fn numbered_history(history: &[ProductText]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t.single_line()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Binds `{count}` and `{history}`.
pub fn render_prompt(t: &PromptTemplate, count: usize, history: &[ProductText]) -> Result<RenderedPrompt, TemplateError> {
    if count == 0 {
        return Err(TemplateError::Input("count must be at least 1".into()));
    }
    if history.is_empty() {
        return Err(TemplateError::Input("history is empty".into()));
    }
    let vars = BTreeMap::from([("count", count.to_string()), ("history", numbered_history(history))]);
    t.render(&vars)
}

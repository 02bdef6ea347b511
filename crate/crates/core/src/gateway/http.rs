use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};
use url::Url;

use super::{BackendError, ChatClient, ChatRequest};

/// A bearer token. Its `Debug` and `Display` never reveal the value.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: String) -> Self {
        Self(value)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

impl fmt::Display for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<redacted>")
    }
}

/// Request body for `/v1/chat/completions`.
pub fn chat_body(model: &str, system: &str, user: &str) -> Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": 0,
    })
}

#[derive(Debug, Clone)]
pub struct HttpChatClient {
    base_url: Url,
    model: String,
    token: Option<Secret>,
    http: reqwest::Client,
}

impl HttpChatClient {
    pub fn new(base_url: Url, model: String, token: Option<Secret>, timeout: Duration) -> Result<Self, BackendError> {
        let http = reqwest::Client::builder().timeout(timeout).build().map_err(|e| BackendError::transport(e.to_string()))?;
        Ok(Self { base_url, model, token, http })
    }
}

fn first_choice_text(body: &Value) -> Result<String, BackendError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::protocol("response has no choices array"))?;
    let first = choices.first().ok_or_else(|| BackendError::empty("choices is empty"))?;
    let content = first
        .pointer("/message/content")
        .ok_or_else(|| BackendError::protocol("first choice has no message.content"))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        _ => return Err(BackendError::protocol("message.content is not a string")),
    };
    if text.trim().is_empty() {
        return Err(BackendError::empty("first choice content is empty"));
    }
    Ok(text)
}

#[async_trait]
impl ChatClient for HttpChatClient {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let url = crate::join_endpoint(&self.base_url, "v1/chat/completions");
        let mut builder = self.http.post(url).json(&chat_body(&self.model, &req.system, &req.user));
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token.expose());
        }
        let resp = builder.send().await.map_err(|e| BackendError::transport(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::protocol(format!("chat endpoint returned {status}")));
        }
        let body: Value = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                BackendError::transport("timed out reading response")
            } else {
                BackendError::protocol(format!("response is not JSON: {}", e.without_url()))
            }
        })?;
        first_choice_text(&body)
    }

    fn identity(&self) -> String {
        format!("chat_completions/{}/{}", self.base_url, self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape() {
        let b = chat_body("m", "sys", "usr");
        assert_eq!(b["model"], "m");
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"], "usr");
        assert_eq!(b["temperature"], 0);
    }

    #[test]
    fn choice_extraction() {
        let ok = json!({"choices":[{"message":{"role":"assistant","content":"1. A"}}]});
        assert_eq!(first_choice_text(&ok).unwrap(), "1. A");
        let empty = json!({"choices":[]});
        assert_eq!(first_choice_text(&empty).unwrap_err().kind, super::super::BackendErrorKind::Empty);
        let blank = json!({"choices":[{"message":{"content":"  "}}]});
        assert_eq!(first_choice_text(&blank).unwrap_err().kind, super::super::BackendErrorKind::Empty);
        let bad = json!({"result":"x"});
        assert_eq!(first_choice_text(&bad).unwrap_err().kind, super::super::BackendErrorKind::Protocol);
    }

    #[test]
    fn secret_is_redacted() {
        let s = Secret::new("sk-very-secret".into());
        assert!(!format!("{s:?} {s}").contains("very-secret"));
        let c = HttpChatClient::new(Url::parse("http://h").unwrap(), "m".into(), Some(s), Duration::from_secs(1)).unwrap();
        assert!(!format!("{c:?}").contains("very-secret"));
        assert!(!c.identity().contains("very-secret"));
    }
}

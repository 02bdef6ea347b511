use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;

use super::parse::format_numbered_list;
use super::{BackendError, ChatClient, ChatRequest, RetrievalContext};
use crate::retrieval::Neighbor;

type ResponderFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

#[derive(Clone)]
enum Responder {
    Replay(Arc<Vec<String>>),
    Func(Arc<ResponderFn>),
}

/// Offline backend answering from a fixed script or a closure.
#[derive(Clone)]
pub struct ScriptedChat {
    responder: Responder,
    delay: Option<Duration>,
    calls: Arc<AtomicUsize>,
    name: String,
}

impl ScriptedChat {
    /// Returns `script[i]` for the i-th call, repeating the last entry.
    pub fn replay(script: Vec<String>) -> Self {
        assert!(!script.is_empty(), "script must not be empty");
        Self { responder: Responder::Replay(Arc::new(script)), delay: None, calls: Arc::default(), name: "replay".into() }
    }

    pub fn from_fn(name: impl Into<String>, f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self { responder: Responder::Func(Arc::new(f)), delay: None, calls: Arc::default(), name: name.into() }
    }

    /// Answers every request with exactly `count` distinct placeholder items.
    pub fn numbered(prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        Self::from_fn(format!("numbered/{prefix}"), move |req| {
            let items: Vec<String> = (1..=req.count).map(|i| format!("{prefix} item {i}")).collect();
            Ok(format_numbered_list(&items))
        })
    }

    pub fn failing(err: BackendError) -> Self {
        Self::from_fn("failing", move |_| Err(err.clone()))
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatClient for ScriptedChat {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        match &self.responder {
            Responder::Replay(script) => Ok(script[n.min(script.len() - 1)].clone()),
            Responder::Func(f) => f(req),
        }
    }

    fn identity(&self) -> String {
        format!("mock_scripted/{}", self.name)
    }
}

/// Wraps a backend and keeps every request it forwards.
pub struct RecordingChat {
    inner: Arc<dyn ChatClient>,
    log: Mutex<Vec<ChatRequest>>,
}

impl RecordingChat {
    pub fn new(inner: Arc<dyn ChatClient>) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log lock").clone()
    }
}

#[async_trait]
impl ChatClient for RecordingChat {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.log.lock().expect("log lock").push(req.clone());
        self.inner.complete(req).await
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

/// Content-aware offline recommender. For each history item, most recent
/// first, it takes the next most similar catalog product not in the history
/// and not yet suggested, cycling until `count` products are chosen. Answers
/// with the products' one-line canonical texts.
pub struct RetrievalChat {
    ctx: RetrievalContext,
    same_category: bool,
    by_text: HashMap<String, String>,
}

impl RetrievalChat {
    pub fn new(ctx: RetrievalContext, same_category: bool) -> Self {
        let mut by_text = HashMap::new();
        for p in ctx.catalog.products() {
            by_text.entry(p.canonical_text().0).or_insert_with(|| p.id.clone());
        }
        Self { ctx, same_category, by_text }
    }

    fn category_of(&self, text: &str) -> Option<String> {
        if let Some(p) = self.by_text.get(text).and_then(|id| self.ctx.catalog.get(id)) {
            return Some(p.main_category.clone());
        }
        text.lines().find_map(|l| l.strip_prefix("Main Category: ")).map(|c| c.trim().to_string())
    }
}

#[async_trait]
impl ChatClient for RetrievalChat {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        if req.history.is_empty() || req.count == 0 {
            return Err(BackendError::empty("nothing to recommend from"));
        }
        let texts: Vec<String> = req.history.iter().map(|t| t.0.clone()).collect();
        let queries = self.ctx.provider.embed(&texts).await.map_err(|e| BackendError::transport(e.to_string()))?;
        let history_ids: HashSet<&str> = texts.iter().filter_map(|t| self.by_text.get(t).map(String::as_str)).collect();
        let k = 2 * req.count;
        let mut lists: Vec<Vec<Neighbor>> = Vec::with_capacity(texts.len());
        for (text, q) in texts.iter().zip(&queries).rev() {
            let category = if self.same_category { self.category_of(text) } else { None };
            let list = self
                .ctx
                .index
                .nearest_filtered(q, k, |row| {
                    !history_ids.contains(row.product_id.as_str()) && category.as_ref().is_none_or(|c| &row.category == c)
                })
                .map_err(|e| BackendError::protocol(e.to_string()))?;
            lists.push(list);
        }
        let mut cursors = vec![0usize; lists.len()];
        let mut chosen: Vec<String> = Vec::new();
        let mut used: HashSet<String> = HashSet::new();
        while chosen.len() < req.count {
            let mut progressed = false;
            for (list, cur) in lists.iter().zip(cursors.iter_mut()) {
                if chosen.len() == req.count {
                    break;
                }
                while let Some(n) = list.get(*cur) {
                    *cur += 1;
                    if used.insert(n.product_id.clone()) {
                        chosen.push(n.product_id.clone());
                        progressed = true;
                        break;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        if chosen.is_empty() {
            return Err(BackendError::empty("no candidate products"));
        }
        let lines: Vec<String> = chosen
            .iter()
            .map(|id| self.ctx.catalog.get(id).expect("indexed product is in catalog").canonical_text().single_line())
            .collect();
        Ok(format_numbered_list(&lines))
    }

    fn identity(&self) -> String {
        format!("mock_retrieval/same_category={}/{}", self.same_category, self.ctx.provider.identity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, Product, ProductText};
    use crate::gateway::{parse_numbered_list, BackendErrorKind};
    use crate::retrieval::{build_index, EmbeddingProvider};

    fn req(count: usize, history: Vec<ProductText>) -> ChatRequest {
        ChatRequest { system: String::new(), user: String::new(), count, history }
    }

    #[tokio::test]
    async fn replay_repeats_last() {
        let c = ScriptedChat::replay(vec!["a".into(), "b".into()]);
        let r = req(1, vec![]);
        assert_eq!(c.complete(&r).await.unwrap(), "a");
        assert_eq!(c.complete(&r).await.unwrap(), "b");
        assert_eq!(c.complete(&r).await.unwrap(), "b");
        assert_eq!(c.calls(), 3);
    }

    #[tokio::test]
    async fn numbered_and_failing() {
        let out = ScriptedChat::numbered("x").complete(&req(3, vec![])).await.unwrap();
        assert_eq!(parse_numbered_list(&out, 3).unwrap().entries.len(), 3);
        let err = ScriptedChat::failing(BackendError::transport("down")).complete(&req(1, vec![])).await.unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::Transport);
    }

    async fn ctx() -> (RetrievalContext, Vec<Product>) {
        let products = vec![
            Product::new("a1", "Books", "mystery novel paperback"),
            Product::new("a2", "Books", "mystery novel hardcover"),
            Product::new("a3", "Books", "cookbook for beginners"),
            Product::new("b1", "Electronics", "usb charging cable"),
            Product::new("b2", "Electronics", "usb wall charger"),
            Product::new("b3", "Electronics", "mystery novel ebook reader"),
        ];
        let catalog = Catalog::from_products(products.clone()).0;
        let provider = EmbeddingProvider::hash(128).unwrap();
        let index = build_index(&catalog, &provider).await.unwrap();
        (RetrievalContext { catalog: Arc::new(catalog), index: Arc::new(index), provider }, products)
    }

    #[tokio::test]
    async fn retrieval_excludes_history_and_respects_category() {
        let (ctx, products) = ctx().await;
        let history = vec![products[0].canonical_text(), products[3].canonical_text()];
        let chat = RetrievalChat::new(ctx.clone(), true);
        let out = chat.complete(&req(4, history.clone())).await.unwrap();
        let parsed = parse_numbered_list(&out, 4).unwrap();
        assert_eq!(parsed.entries.len(), 4);
        let texts: Vec<&str> = parsed.entries.iter().map(|e| e.text.as_str()).collect();
        assert!(texts.iter().all(|t| !t.starts_with("Title: mystery novel paperback") && !t.starts_with("Title: usb charging cable")));
        // Most recent item (the cable) leads, and its best match is the charger.
        assert!(texts[0].starts_with("Title: usb wall charger"), "{texts:?}");
        assert!(texts[1].starts_with("Title: mystery novel hardcover"), "{texts:?}");
        assert_eq!(out, chat.complete(&req(4, history)).await.unwrap());
    }

    #[tokio::test]
    async fn retrieval_runs_out_gracefully() {
        let (ctx, products) = ctx().await;
        let chat = RetrievalChat::new(ctx, true);
        let out = chat.complete(&req(10, vec![products[0].canonical_text()])).await.unwrap();
        assert_eq!(parse_numbered_list(&out, 10).unwrap().entries.len(), 2);
    }

    #[tokio::test]
    async fn recorder_keeps_requests() {
        let rec = RecordingChat::new(Arc::new(ScriptedChat::numbered("x")));
        rec.complete(&req(2, vec![ProductText("h".into())])).await.unwrap();
        assert_eq!(rec.requests().len(), 1);
        assert_eq!(rec.requests()[0].history[0].0, "h");
    }
}

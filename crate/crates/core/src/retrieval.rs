//! Top-k passage retrieval and order-preserving parallel fan-out.
//!
//! The local backend is a lexical tf-idf index scored by cosine similarity.
//! Weights are `(1 + ln tf) * ln((N + 1) / (df + 1))` and terms are
//! lowercased alphanumeric runs. A remote backend speaks a small batch
//! protocol over HTTP.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tags::truncate_tokens;

pub const DEFAULT_TOPK: usize = 3;
pub const MAX_TOPK: usize = 10;
pub const DEFAULT_PASSAGE_TOKEN_CAP: usize = 500;
pub const DEFAULT_FANOUT_LIMIT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub title: String,
    pub passage: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub topk: usize,
    pub passage_token_cap: usize,
    pub fanout_limit: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            topk: DEFAULT_TOPK,
            passage_token_cap: DEFAULT_PASSAGE_TOKEN_CAP,
            fanout_limit: DEFAULT_FANOUT_LIMIT,
        }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("topk must be in 1..={MAX_TOPK}, got {0}")]
    InvalidTopK(usize),
    #[error("fan-out batch is empty")]
    EmptyBatch,
    #[error("corpus line {line}: {message}")]
    CorpusFormat { line: usize, message: String },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("remote retriever returned status {status}")]
    RemoteError { status: u16 },
}

impl RetrievalError {
    /// True for failures of an external service rather than of local data.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            RetrievalError::Transport(_)
                | RetrievalError::MalformedResponse(_)
                | RetrievalError::RemoteError { .. }
        )
    }
}

pub type QueryResult = Result<Vec<RetrievalResult>, RetrievalError>;

pub fn check_topk(topk: usize) -> Result<(), RetrievalError> {
    if (1..=MAX_TOPK).contains(&topk) {
        Ok(())
    } else {
        Err(RetrievalError::InvalidTopK(topk))
    }
}

/// Lowercased alphanumeric runs.
pub fn terms(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn term_frequencies(text: &str) -> BTreeMap<String, u32> {
    let mut tf = BTreeMap::new();
    for term in terms(text) {
        *tf.entry(term).or_insert(0) += 1;
    }
    tf
}

fn tf_weight(tf: u32) -> f64 {
    1.0 + f64::from(tf).ln()
}

/// Orders results by descending score, then ascending doc id.
pub fn rank_order(a: &RetrievalResult, b: &RetrievalResult) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Immutable inverted index over a corpus.
#[derive(Debug)]
pub struct Index {
    docs: Vec<Document>,
    /// term -> (doc index, weight), doc indices ascending.
    postings: HashMap<String, Vec<(usize, f64)>>,
    df: HashMap<String, usize>,
    norms: Vec<f64>,
}

impl Index {
    pub fn build(corpus: impl IntoIterator<Item = Document>) -> Result<Self, RetrievalError> {
        let mut docs = Vec::new();
        let mut seen = HashSet::new();
        for doc in corpus {
            if !seen.insert(doc.id.clone()) {
                return Err(RetrievalError::DuplicateDocId(doc.id));
            }
            if doc.text.trim().is_empty() {
                return Err(RetrievalError::EmptyDocument(doc.id));
            }
            docs.push(doc);
        }
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }

        let doc_tfs: Vec<BTreeMap<String, u32>> =
            docs.iter().map(|d| term_frequencies(&d.text)).collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for tfs in &doc_tfs {
            for term in tfs.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
        }

        let n = docs.len();
        let mut postings: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
        let mut norms = vec![0.0; n];
        for (i, tfs) in doc_tfs.iter().enumerate() {
            let mut sq = 0.0;
            for (term, &tf) in tfs {
                let w = tf_weight(tf) * idf(n, df[term]);
                sq += w * w;
                postings.entry(term.clone()).or_default().push((i, w));
            }
            norms[i] = sq.sqrt();
        }

        Ok(Self {
            docs,
            postings,
            df,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.df.len()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// Weight of `term` in the document with id `doc_id`, zero when absent.
    pub fn weight(&self, term: &str, doc_id: &str) -> f64 {
        let Some(i) = self.docs.iter().position(|d| d.id == doc_id) else {
            return 0.0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.iter().find(|(d, _)| *d == i))
            .map_or(0.0, |(_, w)| *w)
    }

    /// Top-k documents sharing at least one term with `query`.
    ///
    /// Passages are cut to `passage_token_cap` whitespace tokens. A zero
    /// vector norm on either side scores 0.
    pub fn retrieve(&self, query: &str, topk: usize, passage_token_cap: usize) -> QueryResult {
        check_topk(topk)?;
        let query_tf = term_frequencies(query);
        if query_tf.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }

        let n = self.docs.len();
        let mut dots: BTreeMap<usize, f64> = BTreeMap::new();
        let mut query_sq = 0.0;
        for (term, &tf) in &query_tf {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let qw = tf_weight(tf) * idf(n, self.df[term]);
            query_sq += qw * qw;
            for &(doc, dw) in list {
                *dots.entry(doc).or_insert(0.0) += qw * dw;
            }
        }
        let query_norm = query_sq.sqrt();

        let mut scored: Vec<RetrievalResult> = dots
            .into_iter()
            .map(|(doc, dot)| {
                let denom = query_norm * self.norms[doc];
                let score = if denom > 0.0 {
                    (dot / denom).max(0.0)
                } else {
                    0.0
                };
                let d = &self.docs[doc];
                RetrievalResult {
                    doc_id: d.id.clone(),
                    title: d.title.clone(),
                    passage: truncate_tokens(&d.text, passage_token_cap),
                    score,
                }
            })
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(topk);
        Ok(scored)
    }
}

fn idf(n: usize, df: usize) -> f64 {
    ((n as f64 + 1.0) / (df as f64 + 1.0)).ln()
}

/// Reads a JSONL corpus of `{"id", "title", "text"}` objects. Blank lines
/// are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusFormat {
                line: i + 1,
                message: e.to_string(),
            })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Anything that can answer retrieval queries.
///
/// `retrieve_batch` returns an outer error only for whole-batch failures;
/// per-query failures stay in their slot.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult;

    fn fanout_limit(&self) -> usize {
        DEFAULT_FANOUT_LIMIT
    }

    fn retrieve_batch(
        &self,
        queries: &[String],
        topk: usize,
    ) -> Result<Vec<QueryResult>, RetrievalError> {
        retrieve_parallel(self, queries, topk, self.fanout_limit())
    }
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult {
        (**self).retrieve(query, topk)
    }

    fn fanout_limit(&self) -> usize {
        (**self).fanout_limit()
    }

    fn retrieve_batch(
        &self,
        queries: &[String],
        topk: usize,
    ) -> Result<Vec<QueryResult>, RetrievalError> {
        (**self).retrieve_batch(queries, topk)
    }
}

impl<R: Retriever + ?Sized> Retriever for Box<R> {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult {
        (**self).retrieve(query, topk)
    }

    fn fanout_limit(&self) -> usize {
        (**self).fanout_limit()
    }

    fn retrieve_batch(
        &self,
        queries: &[String],
        topk: usize,
    ) -> Result<Vec<QueryResult>, RetrievalError> {
        (**self).retrieve_batch(queries, topk)
    }
}

/// Runs `f` over `items` on at most `limit` worker threads, returning the
/// outputs in input order.
pub(crate) fn ordered_fan_out<T, U, F>(items: &[T], limit: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<U>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                *slots[i].lock().expect("slot lock poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("slot lock poisoned")
                .expect("every slot filled")
        })
        .collect()
}

/// Issues every query concurrently (at most `fanout_limit` in flight) and
/// returns results in query order.
pub fn retrieve_parallel<R: Retriever + ?Sized>(
    retriever: &R,
    queries: &[String],
    topk: usize,
    fanout_limit: usize,
) -> Result<Vec<QueryResult>, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::EmptyBatch);
    }
    check_topk(topk)?;
    Ok(ordered_fan_out(queries, fanout_limit, |q| {
        retriever.retrieve(q, topk)
    }))
}

/// One query after another; the reference for `retrieve_parallel`.
pub fn retrieve_sequential<R: Retriever + ?Sized>(
    retriever: &R,
    queries: &[String],
    topk: usize,
) -> Vec<QueryResult> {
    queries
        .iter()
        .map(|q| retriever.retrieve(q, topk))
        .collect()
}

/// Retriever backed by an in-process [`Index`].
#[derive(Debug)]
pub struct LocalRetriever {
    index: Index,
    config: RetrieverConfig,
}

impl LocalRetriever {
    pub fn new(index: Index, config: RetrieverConfig) -> Self {
        Self { index, config }
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn config(&self) -> RetrieverConfig {
        self.config
    }
}

impl Retriever for LocalRetriever {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult {
        self.index
            .retrieve(query, topk, self.config.passage_token_cap)
    }

    fn fanout_limit(&self) -> usize {
        self.config.fanout_limit
    }
}

/// Sleeps a fixed time before every query. Used to measure fan-out
/// latency.
#[derive(Debug)]
pub struct DelayedRetriever<R> {
    inner: R,
    delay: Duration,
}

impl<R> DelayedRetriever<R> {
    pub fn new(inner: R, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<R: Retriever> Retriever for DelayedRetriever<R> {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult {
        thread::sleep(self.delay);
        self.inner.retrieve(query, topk)
    }

    fn fanout_limit(&self) -> usize {
        self.inner.fanout_limit()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteRetrieveRequest {
    pub queries: Vec<String>,
    pub topk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteHit {
    pub id: String,
    pub title: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteRetrieveResponse {
    pub results: Vec<Vec<RemoteHit>>,
}

/// Client for a remote retriever: one POST to `{endpoint}/retrieve` per
/// batch.
#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    endpoint: String,
    agent: ureq::Agent,
    passage_token_cap: usize,
    fanout_limit: usize,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent: config.into(),
            passage_token_cap: DEFAULT_PASSAGE_TOKEN_CAP,
            fanout_limit: DEFAULT_FANOUT_LIMIT,
        }
    }

    pub fn with_passage_token_cap(mut self, cap: usize) -> Self {
        self.passage_token_cap = cap;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Sends the whole batch in one round-trip and validates the response.
    pub fn remote_retrieve(
        &self,
        queries: &[String],
        topk: usize,
    ) -> Result<Vec<Vec<RetrievalResult>>, RetrievalError> {
        if queries.is_empty() {
            return Err(RetrievalError::EmptyBatch);
        }
        check_topk(topk)?;
        let request = RemoteRetrieveRequest {
            queries: queries.to_vec(),
            topk,
        };
        let url = format!("{}/retrieve", self.endpoint);
        let mut response = match self.agent.post(&url).send_json(&request) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(status)) => {
                return Err(RetrievalError::RemoteError { status })
            }
            Err(e) => return Err(RetrievalError::Transport(e.to_string())),
        };
        let body: RemoteRetrieveResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::MalformedResponse(e.to_string()))?;
        validate_remote(queries.len(), topk, body, self.passage_token_cap)
    }
}

fn validate_remote(
    expected: usize,
    topk: usize,
    body: RemoteRetrieveResponse,
    passage_token_cap: usize,
) -> Result<Vec<Vec<RetrievalResult>>, RetrievalError> {
    if body.results.len() != expected {
        return Err(RetrievalError::MalformedResponse(format!(
            "{} result lists for {} queries",
            body.results.len(),
            expected
        )));
    }
    body.results
        .into_iter()
        .enumerate()
        .map(|(qi, hits)| {
            if hits.len() > topk {
                return Err(RetrievalError::MalformedResponse(format!(
                    "query {qi}: {} results for topk {topk}",
                    hits.len()
                )));
            }
            let results: Vec<RetrievalResult> = hits
                .into_iter()
                .map(|h| RetrievalResult {
                    doc_id: h.id,
                    title: h.title,
                    passage: truncate_tokens(&h.text, passage_token_cap),
                    score: h.score,
                })
                .collect();
            if let Some(bad) = results
                .iter()
                .find(|r| !r.score.is_finite() || r.score < 0.0)
            {
                return Err(RetrievalError::MalformedResponse(format!(
                    "query {qi}: invalid score {} for {:?}",
                    bad.score, bad.doc_id
                )));
            }
            if results
                .windows(2)
                .any(|w| rank_order(&w[0], &w[1]) == std::cmp::Ordering::Greater)
            {
                return Err(RetrievalError::MalformedResponse(format!(
                    "query {qi}: results are not ordered by descending score"
                )));
            }
            Ok(results)
        })
        .collect()
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, topk: usize) -> QueryResult {
        let mut lists = self.remote_retrieve(&[query.to_string()], topk)?;
        Ok(lists.pop().unwrap_or_default())
    }

    fn fanout_limit(&self) -> usize {
        self.fanout_limit
    }

    fn retrieve_batch(
        &self,
        queries: &[String],
        topk: usize,
    ) -> Result<Vec<QueryResult>, RetrievalError> {
        Ok(self
            .remote_retrieve(queries, topk)?
            .into_iter()
            .map(Ok)
            .collect())
    }
}

//! Local BM25 and remote retrieval behind one interface.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use cocoa_core::bm25::{Bm25Error, RankedPassages, RetrievalIndex, ScoredPassage};
use cocoa_core::Passage;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};

pub const INDEX_FILE: &str = "bm25_index.json";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Bm25(#[from] Bm25Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("index {path}: {message}")]
    Index { path: String, message: String },
    #[error("index was built for corpus {index} but the store has {store}")]
    StaleIndex { index: String, store: String },
    #[error("retrieval endpoint timed out")]
    Timeout,
    #[error("retrieval endpoint unreachable: {0}")]
    Transport(String),
    #[error("retrieval endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("retrieval response does not match the expected schema: {0}")]
    Schema(String),
    #[error("k must be >= 1")]
    ZeroK,
}

pub fn build_index(corpus: &Corpus, k1: f64, b: f64) -> Result<RetrievalIndex, RetrievalError> {
    Ok(RetrievalIndex::build(corpus.passages(), corpus.handle().checksum.clone(), k1, b)?)
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<(), RetrievalError> {
    let err = |message: String| RetrievalError::Index { path: path.display().to_string(), message };
    let bytes = serde_json::to_vec(index).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| err(e.to_string()))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex, RetrievalError> {
    let err = |message: String| RetrievalError::Index { path: path.display().to_string(), message };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
}

/// Loads `index_path` if given (checking it belongs to the store), otherwise
/// `<store>/bm25_index.json` if present, otherwise builds in memory.
pub fn open_local(store: &Path, index_path: Option<&Path>, k1: f64, b: f64) -> Result<RetrievalIndex, RetrievalError> {
    let corpus = Corpus::open(store)?;
    let default_path = store.join(INDEX_FILE);
    let path = index_path.map(Path::to_path_buf).or_else(|| default_path.exists().then_some(default_path));
    let index = match path {
        Some(p) => load_index(&p)?,
        None => build_index(&corpus, k1, b)?,
    };
    if index.corpus_checksum != corpus.handle().checksum {
        return Err(RetrievalError::StaleIndex {
            index: index.corpus_checksum,
            store: corpus.handle().checksum.clone(),
        });
    }
    Ok(index)
}

#[derive(Deserialize)]
struct RemoteResponse {
    results: Vec<RemoteHit>,
}

#[derive(Deserialize)]
struct RemoteHit {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    score: f64,
}

/// Retrieval service speaking `POST {"query", "k"}` →
/// `{"results": [{"id", "title", "text", "score"}]}`.
#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    http: reqwest::blocking::Client,
    endpoint: String,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, RetrievalError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        Ok(Self { http, endpoint: endpoint.into() })
    }

    pub fn search(&self, query: &str, k: usize) -> Result<RankedPassages, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let transport = |e: reqwest::Error| {
            if e.is_timeout() {
                RetrievalError::Timeout
            } else {
                RetrievalError::Transport(e.to_string())
            }
        };
        let resp = self
            .http
            .post(&self.endpoint)
            .json(&json!({"query": query, "k": k}))
            .send()
            .map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let bytes = resp.bytes().map_err(transport)?;
        let parsed: RemoteResponse =
            serde_json::from_slice(&bytes).map_err(|e| RetrievalError::Schema(e.to_string()))?;
        let mut items = Vec::with_capacity(parsed.results.len());
        for hit in parsed.results {
            if !hit.score.is_finite() {
                return Err(RetrievalError::Schema(format!("non-finite score for `{}`", hit.id)));
            }
            let passage = Passage::new(hit.id, hit.title, hit.text).map_err(|e| RetrievalError::Schema(e.to_string()))?;
            items.push(ScoredPassage { passage, score: hit.score });
        }
        Ok(RankedPassages::normalized(items, k))
    }
}

#[derive(Debug, Clone)]
pub enum Retriever {
    Local(Arc<RetrievalIndex>),
    Remote(RemoteRetriever),
}

impl Retriever {
    pub fn search(&self, query: &str, k: usize) -> Result<RankedPassages, RetrievalError> {
        match self {
            Retriever::Local(index) => Ok(index.search(query, k)?),
            Retriever::Remote(remote) => remote.search(query, k),
        }
    }
}

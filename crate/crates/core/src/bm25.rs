//! Okapi BM25 over an in-memory inverted index.
//!
//! Tokens are lowercased runs of alphanumeric characters. IDF is
//! `ln((N - df + 0.5) / (df + 0.5))` floored at zero, and a document's score
//! is the sum over query tokens (repeats included, in query order) of
//! `idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`.
//! Every document receives a score, so a search returns `min(k, N)` hits;
//! ties are broken by ascending passage id.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Passage;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Bm25Error {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("k1 must be > 0, got {0}")]
    K1OutOfRange(f64),
    #[error("b must be within [0, 1], got {0}")]
    BOutOfRange(f64),
    #[error("query has no indexable tokens")]
    EmptyQuery,
    #[error("k must be >= 1")]
    ZeroK,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub corpus_checksum: String,
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub k1: f64,
    pub b: f64,
    doc_lens: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    passages: Vec<Passage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage: Passage,
    pub score: f64,
}

/// Top-k result list, scores non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPassages {
    pub items: Vec<ScoredPassage>,
    pub k_requested: usize,
}

impl RankedPassages {
    /// Sorts by descending score then ascending id, drops repeated ids and
    /// truncates to `k_requested`.
    pub fn normalized(mut items: Vec<ScoredPassage>, k_requested: usize) -> Self {
        items.sort_by(|a, b| rank_order(a.score, &a.passage.id, b.score, &b.passage.id));
        let mut seen: Vec<&str> = Vec::new();
        let mut keep = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if !seen.contains(&item.passage.id.as_str()) {
                seen.push(&item.passage.id);
                keep.push(i);
            }
        }
        let items: Vec<ScoredPassage> = items
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, it)| it)
            .take(k_requested)
            .collect();
        Self { items, k_requested }
    }

    pub fn passages(&self) -> Vec<Passage> {
        self.items.iter().map(|s| s.passage.clone()).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|s| s.passage.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Total order used for ranking: higher score first, then smaller id.
pub fn rank_order(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

impl RetrievalIndex {
    /// Builds the index. `corpus_checksum` binds the index to the corpus it
    /// was built from.
    pub fn build(
        passages: &[Passage],
        corpus_checksum: impl Into<String>,
        k1: f64,
        b: f64,
    ) -> Result<Self, Bm25Error> {
        if !(k1 > 0.0) || !k1.is_finite() {
            return Err(Bm25Error::K1OutOfRange(k1));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Bm25Error::BOutOfRange(b));
        }
        if passages.is_empty() {
            return Err(Bm25Error::EmptyCorpus);
        }

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(passages.len());
        let mut total_len = 0u64;
        for (doc, p) in passages.iter().enumerate() {
            let tokens = tokenize(&p.text);
            doc_lens.push(tokens.len() as u32);
            total_len += tokens.len() as u64;
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
            }
        }

        let doc_count = passages.len();
        Ok(Self {
            corpus_checksum: corpus_checksum.into(),
            doc_count,
            avg_doc_len: total_len as f64 / doc_count as f64,
            k1,
            b,
            doc_lens,
            postings,
            passages: passages.to_vec(),
        })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        let raw = libm::log((n - df + 0.5) / (df + 0.5));
        if raw > 0.0 {
            raw
        } else {
            0.0
        }
    }

    /// BM25 score of every document, in corpus order.
    pub fn score_all(&self, query_text: &str) -> Result<Vec<f64>, Bm25Error> {
        let terms = tokenize(query_text);
        if terms.is_empty() {
            return Err(Bm25Error::EmptyQuery);
        }
        let mut scores = alloc::vec![0.0f64; self.doc_count];
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for posting in list {
                let tf = posting.tf as f64;
                let dl = self.doc_lens[posting.doc as usize] as f64;
                let norm = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len);
                scores[posting.doc as usize] += idf * (tf * (self.k1 + 1.0)) / norm;
            }
        }
        Ok(scores)
    }

    pub fn search(&self, query_text: &str, k: usize) -> Result<RankedPassages, Bm25Error> {
        if k == 0 {
            return Err(Bm25Error::ZeroK);
        }
        let scores = self.score_all(query_text)?;
        let mut order: Vec<usize> = (0..self.doc_count).collect();
        order.sort_by(|&a, &b| {
            rank_order(scores[a], &self.passages[a].id, scores[b], &self.passages[b].id)
        });
        let items = order
            .into_iter()
            .take(k)
            .map(|i| ScoredPassage {
                passage: self.passages[i].clone(),
                score: scores[i],
            })
            .collect();
        Ok(RankedPassages { items, k_requested: k })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn corpus() -> Vec<Passage> {
        vec![
            Passage::new("p1", "", "apple pie").unwrap(),
            Passage::new("p2", "", "banana bread").unwrap(),
            Passage::new("p3", "", "car engine").unwrap(),
        ]
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Hello, World! x-ray 42b"), vec!["hello", "world", "x", "ray", "42b"]);
        assert!(tokenize(" ,.;").is_empty());
    }

    #[test]
    fn build_stats() {
        let idx = RetrievalIndex::build(&corpus(), "c", DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx.doc_count, 3);
        assert_eq!(idx.avg_doc_len, 2.0);
        let again = RetrievalIndex::build(&corpus(), "c", DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn parameter_and_input_errors() {
        assert_eq!(RetrievalIndex::build(&corpus(), "c", 1.2, 1.5), Err(Bm25Error::BOutOfRange(1.5)));
        assert!(matches!(RetrievalIndex::build(&corpus(), "c", 0.0, 0.5), Err(Bm25Error::K1OutOfRange(_))));
        assert_eq!(RetrievalIndex::build(&[], "c", 1.2, 0.75), Err(Bm25Error::EmptyCorpus));
        let idx = RetrievalIndex::build(&corpus(), "c", 1.2, 0.75).unwrap();
        assert_eq!(idx.search("!!", 1), Err(Bm25Error::EmptyQuery));
        assert_eq!(idx.search("apple", 0), Err(Bm25Error::ZeroK));
    }

    #[test]
    fn sole_term_match() {
        let idx = RetrievalIndex::build(&corpus(), "c", 1.2, 0.75).unwrap();
        assert_eq!(idx.search("banana", 1).unwrap().ids(), vec!["p2"]);
    }

    #[test]
    fn identical_docs_tie_break_by_id() {
        let docs = vec![
            Passage::new("p2", "", "same text").unwrap(),
            Passage::new("p1", "", "same text").unwrap(),
        ];
        let idx = RetrievalIndex::build(&docs, "c", 1.2, 0.75).unwrap();
        assert_eq!(idx.search("same", 2).unwrap().ids(), vec!["p1", "p2"]);
    }

    #[test]
    fn normalized_resorts_and_dedupes() {
        let mk = |id: &str, s: f64| ScoredPassage {
            passage: Passage::new(id, "", "t").unwrap(),
            score: s,
        };
        let r = RankedPassages::normalized(vec![mk("a", 1.0), mk("b", 3.0), mk("b", 2.0), mk("c", 2.0)], 2);
        assert_eq!(r.ids(), vec!["b", "c"]);
        assert_eq!(r.items[0].score, 3.0);
    }
}

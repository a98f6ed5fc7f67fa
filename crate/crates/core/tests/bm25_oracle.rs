//! BM25 ranking checked against a direct per-document recomputation.

use cocoa_core::bm25::RetrievalIndex;
use cocoa_core::Passage;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Scores each document from scratch: df by scanning every document, tf by
/// scanning the document, same Okapi expression.
fn brute_force(docs: &[Passage], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| toks(&d.text)).collect();
    let n = docs.len() as f64;
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let q = toks(query);
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(&tokenized)
        .map(|(d, dt)| {
            let mut score = 0.0;
            for term in &q {
                let df = tokenized.iter().filter(|t| t.contains(term)).count() as f64;
                let tf = dt.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
                let dl = dt.len() as f64;
                score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
            (d.id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

#[test]
fn two_term_query_matches_brute_force() {
    let docs = vec![
        Passage::new("p1", "", "apple pie").unwrap(),
        Passage::new("p2", "", "banana bread").unwrap(),
        Passage::new("p3", "", "car engine").unwrap(),
    ];
    let idx = RetrievalIndex::build(&docs, "c", 1.2, 0.75).unwrap();
    let got = idx.search("apple banana", 3).unwrap();
    let want = brute_force(&docs, "apple banana", 1.2, 0.75);
    assert_eq!(got.ids(), want.iter().map(|w| w.0.as_str()).collect::<Vec<_>>());
    assert_eq!(got.ids(), vec!["p1", "p2", "p3"]);
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Passage>> {
    prop::collection::vec(prop::collection::vec(0usize..12, 1..12), 1..50).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, words)| {
                let text: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
                Passage::new(format!("d{i:03}"), "", text.join(" ")).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_equals_oracle_and_is_prefix_monotone(
        docs in corpus_strategy(),
        query in prop::collection::vec(0usize..14, 1..4),
        k in 1usize..60,
    ) {
        let q: Vec<String> = query.iter().map(|w| format!("w{w}")).collect();
        let q = q.join(" ");
        let idx = RetrievalIndex::build(&docs, "c", 1.2, 0.75).unwrap();
        let got = idx.search(&q, k).unwrap();
        let want = brute_force(&docs, &q, 1.2, 0.75);
        prop_assert_eq!(got.len(), k.min(docs.len()));
        let want_ids: Vec<&str> = want.iter().take(k).map(|w| w.0.as_str()).collect();
        prop_assert_eq!(got.ids(), want_ids);
        for pair in got.items.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        let longer = idx.search(&q, k + 5).unwrap();
        prop_assert_eq!(&longer.ids()[..got.len()], &got.ids()[..]);
        prop_assert_eq!(idx.search(&q, k).unwrap(), got);
    }
}

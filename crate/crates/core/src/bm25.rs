//! Okapi BM25 over an in-memory inverted index, used to mine the candidate
//! demonstrations for each training sample.
//!
//! score(D, Q) = Σ_{q ∈ Q} IDF(q) · tf(q, D)·(k1 + 1) / (tf(q, D) + k1·(1 − b + b·|D|/avgdl))
//! IDF(q)      = ln((N − n(q) + 0.5) / (n(q) + 0.5) + 1)
//!
//! Q is a multiset: a term repeated in the query contributes once per occurrence.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{cosine_similarity, Example, ExampleBank};
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_CANDIDATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Unicode word segmentation followed by case folding.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    doc_ids: Vec<String>,
    avg_doc_len: f64,
    params: Bm25Params,
}

/// Candidate demonstrations mined for one sample, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub owner: String,
    pub candidates: Vec<(usize, f64)>,
    pub capacity: usize,
}

impl CandidateSet {
    pub fn indices(&self) -> Vec<usize> {
        self.candidates.iter().map(|&(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Indexes `"input output"` of every example in the bank.
pub fn build_index(bank: &ExampleBank, params: Bm25Params) -> Result<InvertedIndex> {
    if bank.is_empty() {
        return Err(Error::EmptyBank(bank.language.clone()));
    }
    if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
        return Err(Error::Parameter(format!(
            "bm25 requires k1 >= 0 and b in [0, 1], got k1={} b={}",
            params.k1, params.b
        )));
    }
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut doc_lengths = Vec::with_capacity(bank.len());
    for (doc, ex) in bank.examples.iter().enumerate() {
        let tokens = tokenize(&ex.joined_text());
        doc_lengths.push(tokens.len() as u32);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in tf {
            // docs are visited in ascending order, so each list stays sorted
            postings.entry(term).or_default().push(Posting { doc, tf });
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avg_doc_len = total as f64 / doc_lengths.len() as f64;
    Ok(InvertedIndex {
        postings,
        doc_lengths,
        doc_ids: bank.examples.iter().map(|e| e.id.clone()).collect(),
        avg_doc_len,
        params,
    })
}

impl InvertedIndex {
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_length(&self, doc: usize) -> u32 {
        self.doc_lengths[doc]
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.postings(term).len() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every document against the query text.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        let Bm25Params { k1, b } = self.params;
        let avgdl = if self.avg_doc_len > 0.0 { self.avg_doc_len } else { 1.0 };
        for term in tokenize(query) {
            let postings = self.postings(&term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(&term);
            for p in postings {
                let tf = p.tf as f64;
                let dl = self.doc_lengths[p.doc] as f64;
                scores[p.doc] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
        }
        scores
    }
}

fn rank_top(scores: impl Iterator<Item = (usize, f64)>, f: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked.truncate(f);
    ranked
}

/// Top-`f` documents for `sample` by BM25, excluding the sample itself and
/// any document with a zero score. Ties go to the lower document index.
pub fn mine_candidates(index: &InvertedIndex, sample: &Example, f: usize) -> Result<CandidateSet> {
    if f < 1 {
        return Err(Error::Parameter("candidate count F must be at least 1".into()));
    }
    let scores = index.score_all(&sample.joined_text());
    let ranked = rank_top(
        scores
            .into_iter()
            .enumerate()
            .filter(|&(i, s)| s > 0.0 && index.doc_ids[i] != sample.id),
        f,
    );
    Ok(CandidateSet {
        owner: sample.id.clone(),
        candidates: ranked,
        capacity: f,
    })
}

/// Fallback miner ranking by cosine of bank-side base embeddings.
pub fn mine_candidates_by_embedding(
    bank: &ExampleBank,
    sample: &Example,
    sample_embedding: ndarray::ArrayView1<f64>,
    f: usize,
) -> Result<CandidateSet> {
    if f < 1 {
        return Err(Error::Parameter("candidate count F must be at least 1".into()));
    }
    let emb = bank.embeddings()?;
    let mut scored = Vec::with_capacity(bank.len());
    for (i, row) in emb.outer_iter().enumerate() {
        if bank.examples[i].id == sample.id {
            continue;
        }
        scored.push((i, cosine_similarity(row, sample_embedding)?));
    }
    Ok(CandidateSet {
        owner: sample.id.clone(),
        candidates: rank_top(scored.into_iter(), f),
        capacity: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(docs: &[&str]) -> ExampleBank {
        ExampleBank::new(
            "xx",
            docs.iter()
                .enumerate()
                .map(|(i, d)| Example::new(format!("d{i}"), *d, "", "xx"))
                .collect(),
        )
        .unwrap()
    }

    fn random_bank(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> ExampleBank {
        let docs: Vec<String> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..12);
                (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..vocab)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        bank(&refs)
    }

    #[test]
    fn single_doc_postings() {
        let idx = build_index(&bank(&["a b a"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("a"), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(idx.postings("b"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.avg_doc_len(), 3.0);
    }

    #[test]
    fn disjoint_docs_have_single_postings() {
        let idx = build_index(&bank(&["a b", "c d"]), Bm25Params::default()).unwrap();
        for t in ["a", "b", "c", "d"] {
            assert_eq!(idx.postings(t).len(), 1);
        }
    }

    #[test]
    fn tokenizer_folds_case_and_drops_punctuation() {
        assert_eq!(tokenize("Hello, WORLD! hello"), vec!["hello", "world", "hello"]);
    }

    #[test]
    fn empty_bank_is_rejected() {
        let b = ExampleBank::new("xx", vec![]).unwrap();
        assert!(matches!(
            build_index(&b, Bm25Params::default()),
            Err(Error::EmptyBank(_))
        ));
    }

    #[test]
    fn term_frequencies_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_bank(&mut rng, 50, 30);
        let idx = build_index(&b, Bm25Params::default()).unwrap();
        for v in 0..30 {
            let term = format!("w{v}");
            let expected: Vec<Posting> = b
                .examples
                .iter()
                .enumerate()
                .filter_map(|(doc, ex)| {
                    let tf = ex.input_text.split(' ').filter(|t| *t == term).count() as u32;
                    (tf > 0).then_some(Posting { doc, tf })
                })
                .collect();
            assert_eq!(idx.postings(&term), expected.as_slice(), "term {term}");
        }
        let mean = b
            .examples
            .iter()
            .map(|e| e.input_text.split(' ').count())
            .sum::<usize>() as f64
            / 50.0;
        assert!((idx.avg_doc_len() - mean).abs() < 1e-12);
    }

    #[test]
    fn identical_doc_ranks_first() {
        let b = bank(&["alpha beta", "gamma delta", "epsilon zeta"]);
        let idx = build_index(&b, Bm25Params::default()).unwrap();
        let query = Example::new("q", "gamma delta", "", "xx");
        let c = mine_candidates(&idx, &query, 3).unwrap();
        assert_eq!(c.candidates[0].0, 1);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn disjoint_query_gives_empty_set() {
        let b = bank(&["alpha beta", "gamma delta"]);
        let idx = build_index(&b, Bm25Params::default()).unwrap();
        let c = mine_candidates(&idx, &Example::new("q", "omega", "", "xx"), 5).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn zero_capacity_is_an_error() {
        let b = bank(&["alpha"]);
        let idx = build_index(&b, Bm25Params::default()).unwrap();
        assert!(matches!(
            mine_candidates(&idx, &b.examples[0], 0),
            Err(Error::Parameter(_))
        ));
    }

    /// Direct per-document evaluation of the formula with no index.
    fn direct_bm25(docs: &[Vec<String>], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
        let dl = docs[doc].len() as f64;
        query
            .iter()
            .map(|q| {
                let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
                let tf = docs[doc].iter().filter(|t| *t == q).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
            })
            .sum()
    }

    #[test]
    fn scores_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_bank(&mut rng, 20, 15);
        let idx = build_index(&b, Bm25Params::default()).unwrap();
        let docs: Vec<Vec<String>> = b.examples.iter().map(|e| tokenize(&e.input_text)).collect();
        for owner in 0..b.len() {
            let sample = &b.examples[owner];
            let c = mine_candidates(&idx, sample, 5).unwrap();
            let mut expected: Vec<(usize, f64)> = (0..b.len())
                .filter(|&d| d != owner)
                .map(|d| (d, direct_bm25(&docs, &docs[owner], d, 1.2, 0.75)))
                .filter(|&(_, s)| s > 0.0)
                .collect();
            expected.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            expected.truncate(5);
            assert_eq!(c.len(), expected.len());
            for (got, want) in c.candidates.iter().zip(&expected) {
                assert_eq!(got.0, want.0);
                assert!((got.1 - want.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_fallback_excludes_self() {
        use ndarray::array;
        let b = bank(&["a", "b", "c"])
            .with_embeddings(array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
            .unwrap();
        let emb = b.embeddings().unwrap().row(0).to_owned();
        let c = mine_candidates_by_embedding(&b, &b.examples[0], emb.view(), 2).unwrap();
        assert_eq!(c.indices(), vec![1, 2]);
    }

    proptest::proptest! {
        #[test]
        fn candidate_sets_exclude_owner_and_are_sorted(seed in 0u64..500, f in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_bank(&mut rng, 15, 8);
            let idx = build_index(&b, Bm25Params::default()).unwrap();
            for (i, ex) in b.examples.iter().enumerate() {
                let c = mine_candidates(&idx, ex, f).unwrap();
                proptest::prop_assert!(c.len() <= f);
                proptest::prop_assert!(c.candidates.iter().all(|&(d, s)| d != i && s > 0.0));
                for w in c.candidates.windows(2) {
                    proptest::prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
                }
            }
        }
    }
}

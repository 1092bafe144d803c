//! Generation metrics: character n-gram F-score and SQuAD-style token F1.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{Error, Result};

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 1.0;

fn counts<T: Eq + Hash, I: IntoIterator<Item = T>>(items: I) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn overlap<T: Eq + Hash>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
}

/// chrF with character orders 1..=6 and β = 1, whitespace removed.
///
/// Precision and recall are averaged over the orders at which both strings
/// have n-grams, then combined. Two empty strings score 100; one empty, 0.
pub fn chrf1(hypothesis: &str, reference: &str) -> f64 {
    chrf(hypothesis, reference, CHRF_ORDER, CHRF_BETA)
}

pub fn chrf(hypothesis: &str, reference: &str, order: usize, beta: f64) -> f64 {
    let h: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (mut p_sum, mut r_sum, mut effective) = (0.0, 0.0, 0usize);
    for n in 1..=order {
        if h.len() < n || r.len() < n {
            continue;
        }
        let hc = counts(h.windows(n));
        let rc = counts(r.windows(n));
        let m = overlap(&hc, &rc) as f64;
        p_sum += m / (h.len() - n + 1) as f64;
        r_sum += m / (r.len() - n + 1) as f64;
        effective += 1;
    }
    let p = p_sum / effective as f64;
    let rec = r_sum / effective as f64;
    let b2 = beta * beta;
    if p + rec == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * p * rec / (b2 * p + rec)
}

/// Lower-cased, punctuation-free whitespace tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.general_category_group() != GeneralCategoryGroup::Punctuation)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Bag-of-tokens F1. Two empty token lists score 1; one empty, 0.
pub fn token_f1(hypothesis: &str, reference: &str) -> f64 {
    let h = normalize_tokens(hypothesis);
    let r = normalize_tokens(reference);
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(&counts(h.iter()), &counts(r.iter())) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let p = common / h.len() as f64;
    let rec = common / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub hypothesis: String,
    pub reference: String,
    #[serde(default)]
    pub chrf1: Option<f64>,
    #[serde(default)]
    pub token_f1: Option<f64>,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, hypothesis: impl Into<String>, reference: impl Into<String>) -> Self {
        EvalRecord {
            query_id: query_id.into(),
            hypothesis: hypothesis.into(),
            reference: reference.into(),
            chrf1: None,
            token_f1: None,
        }
    }

    pub fn scored(mut self) -> Self {
        self.chrf1 = Some(chrf1(&self.hypothesis, &self.reference));
        self.token_f1 = Some(token_f1(&self.hypothesis, &self.reference));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub count: usize,
    pub chrf1: f64,
    pub token_f1: f64,
}

/// Scores any unscored record and averages both metrics.
pub fn evaluate_run(records: &[EvalRecord], task: &str) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::Parameter("no predictions to evaluate".into()));
    }
    let scores: Vec<(f64, f64)> = records
        .par_iter()
        .map(|r| {
            (
                r.chrf1.unwrap_or_else(|| chrf1(&r.hypothesis, &r.reference)),
                r.token_f1.unwrap_or_else(|| token_f1(&r.hypothesis, &r.reference)),
            )
        })
        .collect();
    let n = scores.len() as f64;
    Ok(EvalSummary {
        task: task.to_owned(),
        count: scores.len(),
        chrf1: scores.iter().map(|s| s.0).sum::<f64>() / n,
        token_f1: scores.iter().map(|s| s.1).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chrf_identity_and_disjoint() {
        assert_eq!(chrf1("बहुत अच्छा", "बहुत अच्छा"), 100.0);
        assert_eq!(chrf1("xyz", "abc"), 0.0);
        assert_eq!(chrf1("", ""), 100.0);
        assert_eq!(chrf1("", "a"), 0.0);
    }

    #[test]
    fn chrf_hand_count() {
        // orders 1-4 effective: 3/4, 2/3, 1/2, 0 on both sides
        let p = (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0;
        assert!((chrf1("abcd", "abce") - 100.0 * p).abs() < 1e-12);
        // whitespace is ignored
        assert!((chrf1("ab cd", "abce") - 100.0 * p).abs() < 1e-12);
    }

    #[test]
    fn chrf_recall_grows_with_matching_suffix() {
        let r = "abcdefgh";
        let mut prev = 0.0;
        for end in 2..=r.len() {
            let s = chrf1(&r[..end], r);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1("a b", "b c"), 0.5);
        assert_eq!(token_f1("Hello, World!", "hello world"), 1.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("x", ""), 0.0);
        assert_eq!(token_f1("a a b", "a b b"), 2.0 / 3.0);
    }

    #[test]
    fn summary_means() {
        let r = |h: &str, rf: &str| EvalRecord::new("q", h, rf);
        let s = evaluate_run(&[r("abc", "abc")], "t").unwrap();
        assert_eq!((s.chrf1, s.token_f1, s.count), (100.0, 1.0, 1));
        let s = evaluate_run(&[r("abc", "abc"), r("abc", "xyz")], "t").unwrap();
        assert_eq!(s.chrf1, 50.0);
        assert!(evaluate_run(&[], "t").is_err());
    }

    #[test]
    fn summary_matches_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let word = |rng: &mut ChaCha8Rng| -> String {
            (0..rng.random_range(1..4))
                .map(|_| ["ka", "ma", "la", "x", "yo"][rng.random_range(0..5)])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let recs: Vec<EvalRecord> = (0..10)
            .map(|i| EvalRecord::new(i.to_string(), word(&mut rng), word(&mut rng)))
            .collect();
        let s = evaluate_run(&recs, "t").unwrap();
        let mut c = 0.0;
        let mut t = 0.0;
        for r in &recs {
            c += chrf1(&r.hypothesis, &r.reference);
            t += token_f1(&r.hypothesis, &r.reference);
        }
        assert!((s.chrf1 - c / 10.0).abs() < 1e-12);
        assert!((s.token_f1 - t / 10.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn bounded_and_identity(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let c = chrf1(&a, &b);
            let t = token_f1(&a, &b);
            proptest::prop_assert!((0.0..=100.0).contains(&c));
            proptest::prop_assert!((0.0..=1.0).contains(&t));
            proptest::prop_assert_eq!(chrf1(&a, &a), 100.0);
            proptest::prop_assert_eq!(token_f1(&a, &a), 1.0);
        }
    }
}

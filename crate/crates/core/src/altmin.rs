//! Auxiliary bank selection and the alternating Specialize/Merge loop.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{bank_mean_embedding, cosine_similarity, BankCollection, ExampleBank};
use crate::error::{Error, Result};
use crate::metrics;
use crate::prompt::{render, PromptTemplate};
use crate::retriever::{embed, label_samples, train_on_labels, RelevanceConfig, RelevanceLabel, RetrieverParams};
use crate::scorer::Scorer;

pub const DEFAULT_DELTA: f64 = 95.0;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSelection {
    pub similarities: BTreeMap<String, f64>,
    pub threshold: f64,
    pub selected: Vec<String>,
}

/// Linear-interpolation percentile (`q` in [0, 100]) of `values`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Parameter(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Keeps candidate banks whose mean-embedding cosine to the target is at
/// least the δ-th percentile of the candidate similarities. Selected tags
/// follow the order of `candidates`.
pub fn select_auxiliary(target: &ExampleBank, candidates: &[&ExampleBank], delta: f64) -> Result<AuxSelection> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no candidate banks to select from".into()));
    }
    let t = bank_mean_embedding(target)?;
    let mut sims = Vec::with_capacity(candidates.len());
    let mut similarities = BTreeMap::new();
    for c in candidates {
        let s = cosine_similarity(bank_mean_embedding(c)?.view(), t.view())
            .map_err(|e| e.context(format!("bank {}", c.language)))?;
        if similarities.insert(c.language.clone(), s).is_some() {
            return Err(Error::Parameter(format!(
                "candidate language {:?} given twice",
                c.language
            )));
        }
        sims.push(s);
    }
    let threshold = percentile(&sims, delta)?;
    let selected = candidates
        .iter()
        .zip(&sims)
        .filter(|(_, &s)| s >= threshold)
        .map(|(c, _)| c.language.clone())
        .collect();
    Ok(AuxSelection {
        similarities,
        threshold,
        selected,
    })
}

/// Elementwise mean of the projections; the version is the largest input version.
pub fn merge_params(phi: &[RetrieverParams]) -> Result<RetrieverParams> {
    let first = phi
        .first()
        .ok_or_else(|| Error::EmptyInput("no parameters to merge".into()))?;
    if phi.len() == 1 {
        return Ok(first.clone());
    }
    let d = first.dim();
    let mut sum = Array2::<f64>::zeros((d, d));
    for p in phi {
        if p.dim() != d {
            return Err(Error::shape(
                "merged projection",
                format!("{d}x{d}"),
                format!("{0}x{0}", p.dim()),
            ));
        }
        sum += &p.projection;
    }
    sum /= phi.len() as f64;
    RetrieverParams::new(sum, phi.iter().map(|p| p.version).max().unwrap_or(0))
}

/// 1-based rank of candidate `positive` under `scores` (higher first, ties to
/// the lower position).
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < positive))
        .count()
}

/// Mean reciprocal rank of the labelled positives among their candidates.
pub fn validate_labels(
    params: &RetrieverParams,
    validation: &ExampleBank,
    pool: &ExampleBank,
    labels: &[RelevanceLabel],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBank(validation.language.clone()));
    }
    let queries = validation.query_embeddings()?;
    let rows = pool.embeddings()?;
    let rr: Vec<f64> = labels
        .par_iter()
        .map(|l| {
            let q = embed(params, queries.row(l.sample))?;
            let scores = l
                .candidates
                .candidates
                .iter()
                .map(|&(c, _)| embed(params, rows.row(c)).map(|e| e.dot(&q)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(1.0 / rank_of(&scores, l.positive) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(rr.iter().sum::<f64>() / rr.len() as f64)
}

/// Labels validation samples against `pool` and returns the MRR under `params`.
pub fn validate(
    params: &RetrieverParams,
    validation: &ExampleBank,
    pool: &ExampleBank,
    scorer: &dyn Scorer,
    config: &RelevanceConfig,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::EmptyBank(validation.language.clone()));
    }
    let labels = label_samples(validation, pool, scorer, config)?;
    validate_labels(params, validation, pool, &labels)
}

/// Generation-based validation: top-`k` demonstrations from `pool` by
/// similarity, rendered through `template`, generated by the scorer and
/// scored with chrF against the gold output. Returned in [0, 1].
pub fn validate_with_generation(
    params: &RetrieverParams,
    validation: &ExampleBank,
    pool: &ExampleBank,
    scorer: &dyn Scorer,
    template: &PromptTemplate,
    k: usize,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::EmptyBank(validation.language.clone()));
    }
    let queries = validation.query_embeddings()?;
    let k = k.min(pool.len());
    let mut total = 0.0;
    for (i, ex) in validation.examples.iter().enumerate() {
        let mut ranked = crate::retriever::rank_by_similarity(params, pool, queries.row(i))?;
        ranked.truncate(k);
        ranked.reverse();
        let demos: Vec<_> = ranked.iter().map(|&(j, _)| &pool.examples[j]).collect();
        let mut query = ex.clone();
        query.output_text.clear();
        let prompt = render(template, &demos, &query)?;
        let hyp = scorer.generate(&prompt, 128)?;
        total += metrics::chrf1(&hyp, &ex.output_text) / 100.0;
    }
    Ok(total / validation.len() as f64)
}

/// How the merged retriever is scored after each iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ValidationMode {
    #[default]
    Mrr,
    Generation {
        template: PromptTemplate,
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltminConfig {
    pub iterations: usize,
    pub relevance: RelevanceConfig,
    pub seed: u64,
}

impl Default for AltminConfig {
    fn default() -> Self {
        AltminConfig {
            iterations: DEFAULT_ITERATIONS,
            relevance: RelevanceConfig::default(),
            seed: 0,
        }
    }
}

/// Seed of the training stream for `bank` at `iteration` (1-based). The
/// first bank of the first iteration uses the global seed itself.
pub fn stream_seed(seed: u64, iteration: usize, bank: usize) -> u64 {
    let stream = (((iteration - 1) as u64) << 32) | bank as u64;
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub phi: Vec<RetrieverParams>,
    pub rho: RetrieverParams,
    pub trace: Vec<f64>,
    pub checkpoints: Vec<RetrieverParams>,
    pub best: Option<usize>,
    /// Final relevance loss of each bank in each iteration.
    pub bank_losses: Vec<Vec<f64>>,
}

impl TrainState {
    fn new(dim: usize) -> Self {
        TrainState {
            iteration: 0,
            phi: Vec::new(),
            rho: RetrieverParams::identity(dim),
            trace: Vec::new(),
            checkpoints: Vec::new(),
            best: None,
            bank_losses: Vec::new(),
        }
    }

    /// Index of the first maximum of the validation trace.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &a) in self.trace.iter().enumerate() {
            if best.is_none_or(|b| a > self.trace[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn best_params(&self) -> Option<&RetrieverParams> {
        self.best.map(|i| &self.checkpoints[i])
    }
}

/// Specialize each training bank from the current merged parameters, merge,
/// validate, and keep the best checkpoint.
pub fn run_alternating_minimization(
    banks: &BankCollection,
    scorer: &dyn Scorer,
    config: &AltminConfig,
    mode: &ValidationMode,
) -> Result<TrainState> {
    config.relevance.validate()?;
    if config.iterations == 0 {
        return Err(Error::Parameter("iterations must be positive".into()));
    }
    let training = banks.training_banks();
    let dim = banks
        .target
        .dim()
        .ok_or_else(|| Error::MissingEmbeddings(banks.target.language.clone()))?;

    // the scorer labels do not depend on the retriever, so they are mined once
    let labels: Vec<Vec<RelevanceLabel>> = training
        .iter()
        .map(|b| {
            label_samples(b, b, scorer, &config.relevance)
                .map_err(|e| e.context(format!("labelling bank {}", b.language)))
        })
        .collect::<Result<_>>()?;
    let val_labels = match mode {
        ValidationMode::Mrr => label_samples(&banks.validation, &banks.target, scorer, &config.relevance)
            .map_err(|e| e.context("labelling validation bank"))?,
        ValidationMode::Generation { .. } => Vec::new(),
    };

    let mut state = TrainState::new(dim);
    for it in 1..=config.iterations {
        let rho = state.rho.clone();
        let outcomes: Vec<(RetrieverParams, f64)> = training
            .par_iter()
            .zip(labels.par_iter())
            .enumerate()
            .map(|(b, (bank, l))| {
                train_on_labels(bank, l, &rho, &config.relevance, stream_seed(config.seed, it, b))
                    .map(|o| (o.params, *o.loss_trace.last().expect("trace has the initial loss")))
                    .map_err(|e| e.context(format!("iteration {it}, bank {}", bank.language)))
            })
            .collect::<Result<_>>()?;
        let (phi, losses): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
        let merged = merge_params(&phi).map_err(|e| e.context(format!("iteration {it}, merge")))?;
        let alpha = match mode {
            ValidationMode::Mrr => validate_labels(&merged, &banks.validation, &banks.target, &val_labels),
            ValidationMode::Generation { template, k } => {
                validate_with_generation(&merged, &banks.validation, &banks.target, scorer, template, *k)
            }
        }
        .map_err(|e| e.context(format!("iteration {it}, validation")))?;
        log::info!("iteration {it}: validation {alpha:.6}");
        state.iteration = it;
        state.phi = phi;
        state.rho = merged.clone();
        state.trace.push(alpha);
        state.checkpoints.push(merged);
        state.bank_losses.push(losses);
        state.best = state.argmax();
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use crate::test_support::random_matrix;
    use ndarray::{array, Array1};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_with_mean(lang: &str, mean: Array1<f64>) -> ExampleBank {
        // two rows symmetric about the mean
        let off = Array1::from_elem(mean.len(), 0.01);
        let rows = ndarray::stack![ndarray::Axis(0), &mean + &off, &mean - &off];
        let ex = (0..2)
            .map(|i| Example::new(format!("{lang}{i}"), "x", "y", lang))
            .collect();
        ExampleBank::new(lang, ex).unwrap().with_embeddings(rows).unwrap()
    }

    fn at_cosine(c: f64) -> Array1<f64> {
        array![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&[5.0, 1.0], 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&[5.0, 1.0], 100.0).unwrap(), 5.0);
        assert!((percentile(&[0.9, 0.5, 0.1, -0.2, 0.05], 95.0).unwrap() - 0.82).abs() < 1e-12);
        assert!(percentile(&[], 10.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn five_clusters_select_the_closest() {
        let target = bank_with_mean("t", array![1.0, 0.0]);
        let cs = [0.9, 0.5, 0.1, -0.2, 0.05];
        let banks: Vec<ExampleBank> = cs
            .iter()
            .enumerate()
            .map(|(i, &c)| bank_with_mean(&format!("c{i}"), at_cosine(c)))
            .collect();
        let refs: Vec<&ExampleBank> = banks.iter().collect();
        let sel = select_auxiliary(&target, &refs, DEFAULT_DELTA).unwrap();
        assert_eq!(sel.selected, vec!["c0"]);
        for (i, &c) in cs.iter().enumerate() {
            assert!((sel.similarities[&format!("c{i}")] - c).abs() < 1e-9);
        }
        assert_eq!(select_auxiliary(&target, &refs, 0.0).unwrap().selected.len(), 5);
        assert!(select_auxiliary(&target, &[], 95.0).is_err());
    }

    #[test]
    fn identical_bank_always_selected() {
        let target = bank_with_mean("t", array![0.3, 0.7]);
        let same = bank_with_mean("s", array![0.3, 0.7]);
        let other = bank_with_mean("o", array![0.7, -0.3]);
        for delta in [0.0, 50.0, 95.0, 100.0] {
            let sel = select_auxiliary(&target, &[&same, &other], delta).unwrap();
            assert!(sel.selected.contains(&"s".to_owned()));
            assert!((sel.similarities["s"] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        let target = bank_with_mean("t", array![1.0, 0.0]);
        let a = bank_with_mean("a", at_cosine(0.5));
        let b = bank_with_mean("b", at_cosine(0.5));
        let sel = select_auxiliary(&target, &[&a, &b], 95.0).unwrap();
        assert_eq!(sel.selected, vec!["a", "b"]);
    }

    #[test]
    fn merge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = RetrieverParams::new(random_matrix(&mut rng, 3, 3), 2).unwrap();
        assert_eq!(merge_params(&[w.clone(), w.clone()]).unwrap().projection, w.projection);
        let three = RetrieverParams::new(Array2::eye(3) * 3.0, 0).unwrap();
        let m = merge_params(&[RetrieverParams::identity(3), three]).unwrap();
        assert_eq!(m.projection, Array2::<f64>::eye(3) * 2.0);
        let ps: Vec<RetrieverParams> = (0..4)
            .map(|v| RetrieverParams::new(random_matrix(&mut rng, 3, 3), v).unwrap())
            .collect();
        let m = merge_params(&ps).unwrap();
        assert_eq!(m.version, 3);
        for i in 0..3 {
            for j in 0..3 {
                let want = ps.iter().map(|p| p.projection[[i, j]]).sum::<f64>() / 4.0;
                assert!((m.projection[[i, j]] - want).abs() < 1e-12);
            }
        }
        let mut shuffled = ps.clone();
        shuffled.shuffle(&mut rng);
        let m2 = merge_params(&shuffled).unwrap();
        for (a, b) in m.projection.iter().zip(m2.projection.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(merge_params(&[RetrieverParams::identity(2), RetrieverParams::identity(3)]).is_err());
        assert!(merge_params(&[]).is_err());
    }

    #[test]
    fn rank_scan() {
        assert_eq!(rank_of(&[0.9, 0.1, 0.5], 0), 1);
        assert_eq!(rank_of(&[0.9, 0.1, 0.5], 2), 2);
        assert_eq!(rank_of(&[0.5, 0.5], 1), 2);
        assert_eq!(rank_of(&[0.5, 0.5], 0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..6).map(|_| rng.random_range(0..4) as f64).collect();
            let pos = rng.random_range(0..6);
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(rank_of(&scores, pos), order.iter().position(|&i| i == pos).unwrap() + 1);
        }
    }

    #[test]
    fn stream_zero_is_the_seed() {
        assert_eq!(stream_seed(42, 1, 0), 42);
        assert_ne!(stream_seed(42, 1, 1), stream_seed(42, 2, 0));
    }

    #[test]
    fn argmax_prefers_earliest() {
        let mut s = TrainState::new(2);
        s.trace = vec![0.2, 0.5, 0.5, 0.1];
        assert_eq!(s.argmax(), Some(1));
    }
}

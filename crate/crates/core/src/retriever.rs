//! Trainable retriever: a square projection over frozen base embeddings
//! followed by unit normalisation, trained with the softmax negative
//! log-likelihood of the scorer-best candidate among the mined candidates.
//!
//! For a sample with query embedding q = φ(x) and candidate embeddings
//! e_j = φ(a_j), with s_j = q·e_j and p = softmax(s):
//!
//!   ℓ = −s_pos + log Σ_j exp(s_j)
//!   ∂ℓ/∂q   = Σ_j (p_j − [j = pos]) e_j
//!   ∂ℓ/∂e_j = (p_j − [j = pos]) q
//!
//! and each unit vector u = Wb/|Wb| back-propagates as
//! ∂ℓ/∂W += ((g − (u·g)u) / |Wb|) ⊗ b.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bm25::{self, Bm25Params, CandidateSet};
use crate::corpus::ExampleBank;
use crate::error::{Error, Result};
use crate::scorer::{best_candidate, ScoreRequest, ScoredCandidate, Scorer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTV1";
pub const MIN_PROJECTED_NORM: f64 = 1e-12;

/// Projection matrix W of the embedding map φ(b) = Wb / |Wb|.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    pub projection: Array2<f64>,
    pub version: u64,
}

impl RetrieverParams {
    /// Identity map: reproduces the base embedding space.
    pub fn identity(dim: usize) -> Self {
        RetrieverParams {
            projection: Array2::eye(dim),
            version: 0,
        }
    }

    pub fn new(projection: Array2<f64>, version: u64) -> Result<Self> {
        if projection.nrows() != projection.ncols() {
            return Err(Error::shape(
                "projection",
                "square matrix",
                format!("{:?}", projection.dim()),
            ));
        }
        if let Some(row) = projection.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "projection".into(),
                row,
            });
        }
        Ok(RetrieverParams { projection, version })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn embed(&self, base: ArrayView1<f64>) -> Result<Array1<f64>> {
        embed(self, base)
    }

    /// Embeds every row of `base`.
    pub fn embed_rows(&self, base: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((base.nrows(), self.dim()));
        for (i, row) in base.outer_iter().enumerate() {
            out.row_mut(i).assign(&embed(self, row)?);
        }
        Ok(out)
    }

    /// `RTV1` checkpoint bytes: magic, u64 d, d×d f32 row-major, u64 version.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(4 + 8 + d * d * 4 + 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for v in self.projection.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.version.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Protocol("checkpoint does not start with RTV1 header".into()));
        }
        let d = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let expected = d
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(20))
            .ok_or_else(|| Error::Protocol("checkpoint header overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::shape(
                "checkpoint",
                format!("{expected} bytes"),
                format!("{} bytes", bytes.len()),
            ));
        }
        let body = &bytes[12..12 + d * d * 4];
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let version = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        RetrieverParams::new(Array2::from_shape_vec((d, d), data).expect("length checked"), version)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// `W·base / |W·base|`.
pub fn embed(params: &RetrieverParams, base: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(embed_with_norm(params, base)?.0)
}

fn embed_with_norm(params: &RetrieverParams, base: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    if base.len() != params.dim() {
        return Err(Error::shape("base embedding", params.dim(), base.len()));
    }
    let v = params.projection.dot(&base);
    let n = v.dot(&v).sqrt();
    if !(n >= MIN_PROJECTED_NORM) {
        return Err(Error::DegenerateProjection { norm: n });
    }
    Ok((v / n, n))
}

/// Accumulates ∂L/∂W for the unit vector u = Wb/|Wb| given ∂L/∂u.
pub(crate) fn backprop_unit(
    grad_w: &mut Array2<f64>,
    unit: ArrayView1<f64>,
    projected_norm: f64,
    base: ArrayView1<f64>,
    grad_unit: ArrayView1<f64>,
    weight: f64,
) {
    let radial = unit.dot(&grad_unit);
    let gv: Array1<f64> = (&grad_unit - &(&unit * radial)) * (weight / projected_norm);
    let outer = gv.view().insert_axis(Axis(1)).dot(&base.insert_axis(Axis(0)));
    *grad_w += &outer;
}

/// One training sample: its query-side base embedding, the bank-side rows of
/// its candidates and the position of the scorer-best candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceItem {
    pub query: Array1<f64>,
    pub candidates: Array2<f64>,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceBatch {
    pub items: Vec<RelevanceItem>,
}

impl RelevanceBatch {
    pub fn new(items: Vec<RelevanceItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("relevance batch".into()));
        }
        for (i, it) in items.iter().enumerate() {
            if it.candidates.nrows() == 0 || it.positive >= it.candidates.nrows() {
                return Err(Error::Parameter(format!(
                    "item {i}: positive {} not within {} candidates",
                    it.positive,
                    it.candidates.nrows()
                )));
            }
            if it.candidates.ncols() != it.query.len() {
                return Err(Error::shape("relevance item", it.query.len(), it.candidates.ncols()));
            }
        }
        Ok(RelevanceBatch { items })
    }
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn item_loss(params: &RetrieverParams, item: &RelevanceItem) -> Result<f64> {
    let q = embed(params, item.query.view())?;
    let sims: Vec<f64> = item
        .candidates
        .outer_iter()
        .map(|row| embed(params, row).map(|e| e.dot(&q)))
        .collect::<Result<_>>()?;
    Ok((log_sum_exp(&sims) - sims[item.positive]).max(0.0))
}

fn item_loss_grad(params: &RetrieverParams, item: &RelevanceItem, weight: f64) -> Result<(f64, Array2<f64>)> {
    let (q, qn) = embed_with_norm(params, item.query.view())?;
    let mut units = Vec::with_capacity(item.candidates.nrows());
    for row in item.candidates.outer_iter() {
        units.push(embed_with_norm(params, row)?);
    }
    let sims: Vec<f64> = units.iter().map(|(e, _)| e.dot(&q)).collect();
    let lse = log_sum_exp(&sims);
    let loss = (lse - sims[item.positive]).max(0.0);

    let d = params.dim();
    let mut grad = Array2::<f64>::zeros((d, d));
    let mut grad_q = Array1::<f64>::zeros(d);
    for (j, ((e, en), row)) in units.iter().zip(item.candidates.outer_iter()).enumerate() {
        let c = (sims[j] - lse).exp() - if j == item.positive { 1.0 } else { 0.0 };
        grad_q.scaled_add(c, e);
        let grad_e = &q * c;
        backprop_unit(&mut grad, e.view(), *en, row, grad_e.view(), weight);
    }
    backprop_unit(&mut grad, q.view(), qn, item.query.view(), grad_q.view(), weight);
    Ok((loss * weight, grad))
}

/// Mean softmax NLL of the positive over each item's candidate set.
pub fn relevance_loss(params: &RetrieverParams, batch: &RelevanceBatch) -> Result<f64> {
    let total: f64 = batch
        .items
        .iter()
        .map(|it| item_loss(params, it))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(total / batch.items.len() as f64)
}

/// Mean loss and its gradient with respect to the projection.
///
/// Per-item terms are evaluated in parallel and summed in item order.
pub fn relevance_loss_and_grad(params: &RetrieverParams, batch: &RelevanceBatch) -> Result<(f64, Array2<f64>)> {
    let w = 1.0 / batch.items.len() as f64;
    let parts: Vec<(f64, Array2<f64>)> = batch
        .items
        .par_iter()
        .map(|it| item_loss_grad(params, it, w))
        .collect::<Result<_>>()?;
    let d = params.dim();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((d, d));
    for (l, g) in parts {
        loss += l;
        grad += &g;
    }
    Ok((loss, grad))
}

/// ∂(relevance_loss)/∂W.
pub fn relevance_grad(params: &RetrieverParams, batch: &RelevanceBatch) -> Result<Array2<f64>> {
    Ok(relevance_loss_and_grad(params, batch)?.1)
}

/// Unit rows of `rows·Wᵀ` and their pre-normalisation norms, for the rows
/// flagged in `used` (others are left zero).
fn project_rows(params: &RetrieverParams, rows: ArrayView2<f64>, used: &[bool]) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut units = rows.dot(&params.projection.t());
    let mut norms = vec![0.0; rows.nrows()];
    for (i, mut u) in units.outer_iter_mut().enumerate() {
        if !used[i] {
            u.fill(0.0);
            continue;
        }
        let n = u.dot(&u).sqrt();
        if !(n >= MIN_PROJECTED_NORM) {
            return Err(Error::DegenerateProjection { norm: n });
        }
        u /= n;
        norms[i] = n;
    }
    Ok((units, norms))
}

/// Tangential part of each row gradient, scaled by 1/|Wb|, folded into ∂L/∂W.
fn backprop_rows(
    grad_w: &mut Array2<f64>,
    units: &Array2<f64>,
    norms: &[f64],
    base: ArrayView2<f64>,
    grad_units: &mut Array2<f64>,
) {
    for ((mut g, u), &n) in grad_units.outer_iter_mut().zip(units.outer_iter()).zip(norms) {
        if n == 0.0 {
            g.fill(0.0);
            continue;
        }
        let radial = u.dot(&g);
        g.scaled_add(-radial, &u);
        g /= n;
    }
    *grad_w += &grad_units.t().dot(&base);
}

/// Relevance loss (and optionally its gradient) over labels that index into
/// shared query and pool tables. Each row is projected once, so the cost no
/// longer scales with the number of candidates per sample.
pub fn indexed_loss_and_grad(
    params: &RetrieverParams,
    queries: ArrayView2<f64>,
    pool: ArrayView2<f64>,
    labels: &[&RelevanceLabel],
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("relevance batch".into()));
    }
    for (what, m) in [("query table", &queries), ("pool table", &pool)] {
        if m.ncols() != params.dim() {
            return Err(Error::shape(what, params.dim(), m.ncols()));
        }
    }
    let mut used_q = vec![false; queries.nrows()];
    let mut used_p = vec![false; pool.nrows()];
    for l in labels {
        if l.candidates.is_empty() || l.positive >= l.candidates.len() {
            return Err(Error::Parameter(format!(
                "sample {}: positive outside its candidates",
                l.sample
            )));
        }
        *used_q
            .get_mut(l.sample)
            .ok_or_else(|| Error::Parameter(format!("sample {} out of range", l.sample)))? = true;
        for &(c, _) in &l.candidates.candidates {
            *used_p
                .get_mut(c)
                .ok_or_else(|| Error::Parameter(format!("candidate {c} out of range")))? = true;
        }
    }
    let (qu, qn) = project_rows(params, queries, &used_q)?;
    let (pu, pn) = project_rows(params, pool, &used_p)?;
    let w = 1.0 / labels.len() as f64;
    let d = params.dim();
    let sim = qu.dot(&pu.t());
    // coef[s, c] = w·(p_c − [c = positive]) summed over the labels of sample s
    let mut coef = Array2::<f64>::zeros(if with_grad { sim.dim() } else { (0, 0) });
    let mut loss = 0.0;
    let mut sims = Vec::new();
    for l in labels {
        let row = sim.row(l.sample);
        sims.clear();
        sims.extend(l.candidates.candidates.iter().map(|&(c, _)| row[c]));
        let lse = log_sum_exp(&sims);
        loss += (lse - sims[l.positive]).max(0.0) * w;
        if with_grad {
            for (j, &(c, _)) in l.candidates.candidates.iter().enumerate() {
                coef[[l.sample, c]] += w * ((sims[j] - lse).exp() - if j == l.positive { 1.0 } else { 0.0 });
            }
        }
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let mut gq = coef.dot(&pu);
    let mut gp = coef.t().dot(&qu);
    let mut grad = Array2::zeros((d, d));
    backprop_rows(&mut grad, &pu, &pn, pool, &mut gp);
    backprop_rows(&mut grad, &qu, &qn, queries, &mut gq);
    Ok((loss, Some(grad)))
}

/// Adam with bias correction over a flat parameter matrix.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: (usize, usize), lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        self.v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        ndarray::Zip::from(params)
            .and(&self.m)
            .and(&self.v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub candidates: usize,
    pub bm25: Bm25Params,
    pub candidates_by_embedding: bool,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            epochs: 120,
            batch_size: 64,
            learning_rate: 1e-4,
            candidates: bm25::DEFAULT_CANDIDATES,
            bm25: Bm25Params::default(),
            candidates_by_embedding: false,
        }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.candidates == 0 {
            return Err(Error::Parameter(
                "epochs, batch size and candidate count must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mined candidates of one sample and the scorer-best among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceLabel {
    pub sample: usize,
    pub candidates: CandidateSet,
    /// Position of ã within `candidates`.
    pub positive: usize,
}

/// Mines candidates for each query sample from `pool` and labels the
/// scorer-best one. Samples with no candidates are dropped.
pub fn label_samples(
    samples: &ExampleBank,
    pool: &ExampleBank,
    scorer: &dyn Scorer,
    config: &RelevanceConfig,
) -> Result<Vec<RelevanceLabel>> {
    let mined: Vec<CandidateSet> = if config.candidates_by_embedding {
        let emb = samples.embeddings()?;
        samples
            .examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| bm25::mine_candidates_by_embedding(pool, ex, emb.row(i), config.candidates))
            .collect::<Result<_>>()?
    } else {
        let index = bm25::build_index(pool, config.bm25)?;
        samples
            .examples
            .par_iter()
            .map(|ex| bm25::mine_candidates(&index, ex, config.candidates))
            .collect::<Result<_>>()?
    };

    let mut requests = Vec::new();
    let mut spans = Vec::with_capacity(mined.len());
    for (i, set) in mined.iter().enumerate() {
        let start = requests.len();
        for &(c, _) in &set.candidates {
            requests.push(ScoreRequest::for_demonstration(
                &pool.examples[c],
                &samples.examples[i],
            )?);
        }
        spans.push(start..requests.len());
    }
    let scores = scorer.score_batch(&requests)?;

    let mut labels = Vec::with_capacity(mined.len());
    for (i, (set, span)) in mined.into_iter().zip(spans).enumerate() {
        if set.is_empty() {
            log::debug!("sample {} has no candidates; skipped", samples.examples[i].id);
            continue;
        }
        let scored: Vec<ScoredCandidate> = scores[span]
            .iter()
            .enumerate()
            .map(|(pos, &logprob)| ScoredCandidate { index: pos, logprob })
            .collect();
        let positive = best_candidate(&scored)?;
        labels.push(RelevanceLabel {
            sample: i,
            candidates: set,
            positive,
        });
    }
    Ok(labels)
}

/// Labels a bank against itself (self-excluded candidates).
pub fn label_bank(bank: &ExampleBank, scorer: &dyn Scorer, config: &RelevanceConfig) -> Result<Vec<RelevanceLabel>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank(bank.language.clone()));
    }
    label_samples(bank, bank, scorer, config)
}

/// Materialises labels into a batch over the bank's embeddings.
pub fn batch_from_labels(
    samples: &ExampleBank,
    pool: &ExampleBank,
    labels: &[&RelevanceLabel],
) -> Result<RelevanceBatch> {
    let queries = samples.query_embeddings()?;
    let rows = pool.embeddings()?;
    let items = labels
        .iter()
        .map(|l| RelevanceItem {
            query: queries.row(l.sample).to_owned(),
            candidates: rows.select(Axis(0), &l.candidates.indices()),
            positive: l.positive,
        })
        .collect();
    RelevanceBatch::new(items)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RetrieverParams,
    /// Full-data loss before training and after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam on pre-computed labels, starting from `init`.
pub fn train_on_labels(
    bank: &ExampleBank,
    labels: &[RelevanceLabel],
    init: &RetrieverParams,
    config: &RelevanceConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput(format!(
            "bank {:?} produced no labelled samples",
            bank.language
        )));
    }
    let mut params = init.clone();
    let mut adam = Adam::new(params.projection.dim(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = bank.query_embeddings()?.view();
    let rows = bank.embeddings()?.view();
    let all: Vec<&RelevanceLabel> = labels.iter().collect();
    let full_loss = |p: &RetrieverParams| indexed_loss_and_grad(p, queries, rows, &all, false).map(|r| r.0);
    let mut trace = vec![full_loss(&params)?];
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut picked: Vec<&RelevanceLabel> = chunk.iter().map(|&i| &labels[i]).collect();
            picked.sort_by_key(|l| l.sample);
            let (_, grad) = indexed_loss_and_grad(&params, queries, rows, &picked, true)?;
            adam.step(&mut params.projection, &grad.expect("gradient requested"));
        }
        trace.push(full_loss(&params)?);
    }
    params.version = init.version + 1;
    RetrieverParams::new(params.projection, params.version).map(|params| TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Labels the bank with the scorer, then fine-tunes from `init`.
pub fn train_relevance(
    bank: &ExampleBank,
    scorer: &dyn Scorer,
    init: &RetrieverParams,
    config: &RelevanceConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let labels = label_bank(bank, scorer, config)?;
    train_on_labels(bank, &labels, init, config, seed)
}

/// All bank items ranked by `⟨φ(a), φ(x)⟩`, best first (ties to lower index).
pub fn rank_by_similarity(
    params: &RetrieverParams,
    bank: &ExampleBank,
    query_base: ArrayView1<f64>,
) -> Result<Vec<(usize, f64)>> {
    let q = embed(params, query_base)?;
    let emb = bank.embeddings()?;
    let mut ranked: Vec<(usize, f64)> = emb
        .outer_iter()
        .enumerate()
        .map(|(i, row)| embed(params, row).map(|e| (i, e.dot(&q))))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked)
}

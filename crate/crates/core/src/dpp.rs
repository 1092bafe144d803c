//! Query-conditioned DPP kernel, greedy MAP inference and the contrastive
//! hinge fine-tuning that teaches the retriever to prefer diverse subsets.
//!
//! With unit embeddings e_i = φ(a_i), q = φ(x) and trade-off λ:
//!
//!   r_i  = exp(λ·⟨e_i, q⟩)           (relevance, always positive)
//!   S_ij = ⟨e_i, e_j⟩                (similarity, unit diagonal)
//!   Z    = diag(r) · S · diag(r)
//!
//! so log Z_ij = log r_i + log r_j + log S_ij wherever S_ij > 0.
//!
//! Log-determinants are taken of `Z_E + 1e-10·I` by Cholesky; a failed
//! factorisation is reported as `f64::NEG_INFINITY`.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ExampleBank;
use crate::error::{Error, Result};
use crate::linalg;
use crate::retriever::{backprop_unit, embed, Adam, RetrieverParams};

pub const JITTER: f64 = 1e-10;
pub const DEFAULT_K: usize = 16;
pub const DEFAULT_SUBSETS: usize = 8;
pub const DEFAULT_POOL: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    pub z: Array2<f64>,
    pub relevance: Array1<f64>,
    pub similarity: Array2<f64>,
    pub query_id: Option<String>,
}

impl DppKernel {
    /// Kernel from explicit relevance and similarity, `Z = diag(r)·S·diag(r)`.
    pub fn from_parts(relevance: Array1<f64>, similarity: Array2<f64>) -> Result<Self> {
        let n = relevance.len();
        if similarity.dim() != (n, n) {
            return Err(Error::shape(
                "similarity",
                format!("{n}x{n}"),
                format!("{:?}", similarity.dim()),
            ));
        }
        if relevance.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Parameter(
                "relevance must be strictly positive and finite".into(),
            ));
        }
        let z = Array2::from_shape_fn((n, n), |(i, j)| relevance[i] * similarity[[i, j]] * relevance[j]);
        Ok(DppKernel {
            z,
            relevance,
            similarity,
            query_id: None,
        })
    }

    /// Wraps an arbitrary PSD matrix, with unit relevance and S = Z.
    pub fn from_matrix(z: Array2<f64>) -> Result<Self> {
        if z.nrows() != z.ncols() {
            return Err(Error::shape("kernel", "square matrix", format!("{:?}", z.dim())));
        }
        let n = z.nrows();
        Ok(DppKernel {
            similarity: z.clone(),
            z,
            relevance: Array1::ones(n),
            query_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Kernel over `bank_embeddings` conditioned on `query_base`.
pub fn build_kernel(
    params: &RetrieverParams,
    bank_embeddings: ArrayView2<f64>,
    query_base: ArrayView1<f64>,
    tradeoff: f64,
) -> Result<DppKernel> {
    if !(tradeoff > 0.0 && tradeoff.is_finite()) {
        return Err(Error::Parameter(format!("trade-off must be positive, got {tradeoff}")));
    }
    let q = embed(params, query_base)?;
    let e = params.embed_rows(bank_embeddings)?;
    kernel_from_units(&e, &q, tradeoff)
}

fn kernel_from_units(e: &Array2<f64>, q: &Array1<f64>, tradeoff: f64) -> Result<DppKernel> {
    let relevance = e.dot(q).mapv(|s| (tradeoff * s).exp());
    let similarity = e.dot(&e.t());
    DppKernel::from_parts(relevance, similarity)
}

fn check_subset(n: usize, subset: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::Parameter(format!(
                "subset index {i} out of range for kernel of size {n}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Parameter(format!("subset index {i} repeated")));
        }
    }
    Ok(())
}

fn principal(z: &Array2<f64>, subset: &[usize]) -> Array2<f64> {
    z.select(Axis(0), subset).select(Axis(1), subset)
}

/// `log det(Z_subset + 1e-10·I)`, or `-inf` when the factorisation fails.
pub fn log_det(kernel: &DppKernel, subset: &[usize]) -> Result<f64> {
    check_subset(kernel.len(), subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    let sub = linalg::add_jitter(&principal(&kernel.z, subset), JITTER);
    Ok(linalg::log_det_spd(&sub).unwrap_or(f64::NEG_INFINITY))
}

/// Greedy MAP selection: the chosen items in order with the log-det gain of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSelection {
    pub selected: Vec<usize>,
    pub gains: Vec<f64>,
}

impl MapSelection {
    pub fn log_det(&self) -> f64 {
        self.gains.iter().sum()
    }
}

/// Greedy MAP inference with incremental Cholesky updates, O(K²·n).
///
/// Each step adds the item with the largest log-det gain (lowest index on
/// ties) and stops early once every remaining addition is singular.
pub fn greedy_map(kernel: &DppKernel, k: usize) -> Result<MapSelection> {
    let n = kernel.len();
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Parameter(format!("K = {k} exceeds the {n} available items")));
    }
    let z = &kernel.z;
    // residual variances d_i² and the growing Cholesky rows c_i
    let mut d2: Vec<f64> = (0..n).map(|i| z[[i, i]] + JITTER).collect();
    let mut c = Array2::<f64>::zeros((n, k));
    let mut taken = vec![false; n];
    let mut out = MapSelection {
        selected: Vec::with_capacity(k),
        gains: Vec::with_capacity(k),
    };
    for step in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] || !(d2[i] > 0.0) {
                continue;
            }
            if best.is_none_or(|b| d2[i] > d2[b]) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        taken[j] = true;
        out.selected.push(j);
        out.gains.push(d2[j].ln());
        let dj = d2[j].sqrt();
        let cj = c.row(j).slice(ndarray::s![..step]).to_owned();
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let ci = c.row(i).slice(ndarray::s![..step]).dot(&cj);
            let ei = (z[[j, i]] - ci) / dj;
            c[[i, step]] = ei;
            d2[i] -= ei * ei;
        }
    }
    Ok(out)
}

/// One positive and several negative index subsets for a training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSample {
    pub sample: usize,
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl SubsetSample {
    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.positive.len();
        if k == 0 {
            return Err(Error::Parameter("positive subset is empty".into()));
        }
        check_subset(n, &self.positive)?;
        for neg in &self.negatives {
            if neg.len() != k {
                return Err(Error::Parameter(format!(
                    "negative subset size {} differs from K = {k}",
                    neg.len()
                )));
            }
            check_subset(n, neg)?;
        }
        Ok(())
    }
}

/// A sample's query, its candidate pool (bank-side rows) and its subsets,
/// indexed into the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DppItem {
    pub query: Array1<f64>,
    pub pool: Array2<f64>,
    pub subsets: SubsetSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DppLoss {
    pub value: f64,
    /// Samples whose positive subset needed extra jitter to factorise.
    pub flagged: usize,
}

// Per-subset forward state for the gradient.
struct SubsetTerm {
    value: f64,
    // (Z_E + jitter·I)^{-1}
    inverse: Array2<f64>,
}

/// Jittered log-det of a principal submatrix, escalating the jitter when the
/// factorisation fails. Returns the value, inverse and whether escalation was needed.
fn subset_term(z: &Array2<f64>, subset: &[usize], escalate: bool) -> Option<(SubsetTerm, bool)> {
    let sub = principal(z, subset);
    let scale = (0..sub.nrows()).map(|i| sub[[i, i]].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = JITTER;
    let mut escalated = false;
    loop {
        let m = linalg::add_jitter(&sub, jitter);
        if let (Some(v), Some(inv)) = (linalg::log_det_spd(&m), linalg::inverse_spd(&m)) {
            return Some((SubsetTerm { value: v, inverse: inv }, escalated));
        }
        if !escalate || jitter > 1e-2 * scale {
            return None;
        }
        jitter *= 100.0;
        escalated = true;
    }
}

struct Forward {
    e: Array2<f64>,
    e_norms: Vec<f64>,
    q: Array1<f64>,
    q_norm: f64,
    r: Array1<f64>,
    z: Array2<f64>,
}

fn forward(params: &RetrieverParams, item: &DppItem, tradeoff: f64) -> Result<Forward> {
    let (q, q_norm) = unit_with_norm(params, item.query.view())?;
    let n = item.pool.nrows();
    let mut e = Array2::zeros((n, params.dim()));
    let mut e_norms = Vec::with_capacity(n);
    for (i, row) in item.pool.outer_iter().enumerate() {
        let (u, nrm) = unit_with_norm(params, row)?;
        e.row_mut(i).assign(&u);
        e_norms.push(nrm);
    }
    let kernel = kernel_from_units(&e, &q, tradeoff)?;
    Ok(Forward {
        e,
        e_norms,
        q,
        q_norm,
        r: kernel.relevance,
        z: kernel.z,
    })
}

fn unit_with_norm(params: &RetrieverParams, base: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    let u = embed(params, base)?;
    let n = params.projection.dot(&base);
    Ok((u, n.dot(&n).sqrt()))
}

/// Adds `sign · ∂ log det(Z_E + jitter·I) / ∂(e, q)` into the accumulators.
fn accumulate_subset_grad(
    fw: &Forward,
    subset: &[usize],
    inverse: &Array2<f64>,
    sign: f64,
    tradeoff: f64,
    grad_e: &mut Array2<f64>,
    grad_q: &mut Array1<f64>,
) {
    for (a, &k) in subset.iter().enumerate() {
        // ∂f/∂r_k = 2 Σ_j G_kj S_kj r_j ;  ∂f/∂e_k (through S) = 2 r_k Σ_j G_kj r_j e_j
        let mut dr = 0.0;
        let mut via_s = Array1::<f64>::zeros(fw.e.ncols());
        for (b, &j) in subset.iter().enumerate() {
            let g = inverse[[a, b]];
            let s_kj = fw.z[[k, j]] / (fw.r[k] * fw.r[j]);
            dr += 2.0 * g * s_kj * fw.r[j];
            via_s.scaled_add(2.0 * fw.r[k] * g * fw.r[j], &fw.e.row(j));
        }
        let mut row = grad_e.row_mut(k);
        row.scaled_add(sign, &via_s);
        // r_k = exp(λ e_k·q)
        let dr_dlin = dr * tradeoff * fw.r[k];
        row.scaled_add(sign * dr_dlin, &fw.q);
        grad_q.scaled_add(sign * dr_dlin, &fw.e.row(k));
    }
}

fn item_loss_grad(
    params: &RetrieverParams,
    item: &DppItem,
    tradeoff: f64,
    weight: f64,
    with_grad: bool,
) -> Result<(f64, bool, Option<Array2<f64>>)> {
    item.subsets.validate(item.pool.nrows())?;
    let fw = forward(params, item, tradeoff)?;
    let (pos, flagged) = subset_term(&fw.z, &item.subsets.positive, true)
        .ok_or_else(|| Error::Parameter("positive subset could not be factorised even with escalated jitter".into()))?;
    if flagged {
        log::debug!("sample {}: positive subset needed extra jitter", item.subsets.sample);
    }
    let d = params.dim();
    let n = item.pool.nrows();
    let mut grad_e = Array2::<f64>::zeros((n, d));
    let mut grad_q = Array1::<f64>::zeros(d);
    let mut loss = 0.0;
    let mut active = 0.0;
    for neg in &item.subsets.negatives {
        let Some((term, _)) = subset_term(&fw.z, neg, false) else {
            continue; // -inf: hinge inactive
        };
        let margin = term.value - pos.value;
        if margin > 0.0 {
            loss += margin;
            if with_grad {
                accumulate_subset_grad(&fw, neg, &term.inverse, 1.0, tradeoff, &mut grad_e, &mut grad_q);
                active += 1.0;
            }
        }
    }
    if !with_grad {
        return Ok((loss * weight, flagged, None));
    }
    if active > 0.0 {
        accumulate_subset_grad(
            &fw,
            &item.subsets.positive,
            &pos.inverse,
            -active,
            tradeoff,
            &mut grad_e,
            &mut grad_q,
        );
    }
    let mut grad = Array2::zeros((d, d));
    for i in 0..n {
        let g = grad_e.row(i);
        if g.iter().any(|v| *v != 0.0) {
            backprop_unit(&mut grad, fw.e.row(i), fw.e_norms[i], item.pool.row(i), g, weight);
        }
    }
    backprop_unit(
        &mut grad,
        fw.q.view(),
        fw.q_norm,
        item.query.view(),
        grad_q.view(),
        weight,
    );
    Ok((loss * weight, flagged, Some(grad)))
}

/// Mean over items of Σ_neg max{0, log det Z_{E⁻} − log det Z_{E⁺}}.
pub fn dpp_loss(params: &RetrieverParams, items: &[DppItem], tradeoff: f64) -> Result<DppLoss> {
    if items.is_empty() {
        return Err(Error::EmptyInput("dpp items".into()));
    }
    let w = 1.0 / items.len() as f64;
    let parts: Vec<(f64, bool, Option<Array2<f64>>)> = items
        .par_iter()
        .map(|it| item_loss_grad(params, it, tradeoff, w, false))
        .collect::<Result<_>>()?;
    Ok(DppLoss {
        value: parts.iter().map(|p| p.0).sum(),
        flagged: parts.iter().filter(|p| p.1).count(),
    })
}

/// Loss and ∂loss/∂W; per-item terms reduced in item order.
pub fn dpp_loss_and_grad(params: &RetrieverParams, items: &[DppItem], tradeoff: f64) -> Result<(DppLoss, Array2<f64>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("dpp items".into()));
    }
    let w = 1.0 / items.len() as f64;
    let parts: Vec<(f64, bool, Option<Array2<f64>>)> = items
        .par_iter()
        .map(|it| item_loss_grad(params, it, tradeoff, w, true))
        .collect::<Result<_>>()?;
    let d = params.dim();
    let mut grad = Array2::zeros((d, d));
    let mut loss = DppLoss::default();
    for (l, f, g) in parts {
        loss.value += l;
        loss.flagged += f as usize;
        grad += &g.expect("gradient requested");
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppConfig {
    pub epochs: usize,
    pub k: usize,
    pub subsets: usize,
    pub tradeoff: f64,
    pub pool: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Retrieval considers only this many most similar items; `None` = whole bank.
    pub shortlist: Option<usize>,
}

impl Default for DppConfig {
    fn default() -> Self {
        DppConfig {
            epochs: 10,
            k: DEFAULT_K,
            subsets: DEFAULT_SUBSETS,
            tradeoff: 1.0,
            pool: DEFAULT_POOL,
            batch_size: 64,
            learning_rate: 1e-4,
            shortlist: None,
        }
    }
}

impl DppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.k == 0 || self.subsets < 2 || self.pool == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "dpp epochs, K, pool and batch size must be positive and subsets at least 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.tradeoff > 0.0) {
            return Err(Error::Parameter(
                "dpp learning rate and trade-off must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DppTrainOutcome {
    pub params: RetrieverParams,
    /// Loss over the epoch's items, measured before each epoch's updates.
    pub loss_trace: Vec<f64>,
    pub flagged: usize,
}

fn top_similar(e: &Array2<f64>, q: &Array1<f64>, exclude: Option<usize>, limit: usize) -> Vec<usize> {
    let sims = e.dot(q);
    let mut idx: Vec<usize> = (0..e.nrows()).filter(|&i| Some(i) != exclude).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(limit);
    idx
}

/// Draws the training subsets of every sample under the current parameters.
pub fn draw_subsets(
    params: &RetrieverParams,
    bank: &ExampleBank,
    config: &DppConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DppItem>> {
    let rows = bank.embeddings()?;
    let queries = bank.query_embeddings()?;
    let e = params.embed_rows(rows.view())?;
    let mut items = Vec::with_capacity(bank.len());
    for i in 0..bank.len() {
        let q = embed(params, queries.row(i))?;
        let pool_idx = top_similar(&e, &q, Some(i), config.pool);
        if pool_idx.is_empty() {
            continue;
        }
        let k = config.k.min(pool_idx.len());
        let pool_units = e.select(Axis(0), &pool_idx);
        let kernel = kernel_from_units(&pool_units, &q, config.tradeoff)?;
        let positive = greedy_map(&kernel, k)?.selected;
        if positive.len() < k {
            continue;
        }
        let negatives = (1..config.subsets)
            .map(|_| index::sample(rng, pool_idx.len(), k).into_vec())
            .collect();
        items.push(DppItem {
            query: queries.row(i).to_owned(),
            pool: rows.select(Axis(0), &pool_idx),
            subsets: SubsetSample {
                sample: i,
                positive,
                negatives,
            },
        });
    }
    Ok(items)
}

/// Contrastive DPP fine-tuning on the merged bank starting from `init`.
pub fn train_dpp(
    init: &RetrieverParams,
    merged: &ExampleBank,
    config: &DppConfig,
    seed: u64,
) -> Result<DppTrainOutcome> {
    config.validate()?;
    if merged.len() < 2 {
        return Err(Error::EmptyBank(merged.language.clone()));
    }
    let mut params = init.clone();
    let mut adam = Adam::new(params.projection.dim(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut flagged = 0;
    for _ in 0..config.epochs {
        let items = draw_subsets(&params, merged, config, &mut rng)?;
        if items.is_empty() {
            return Err(Error::EmptyInput("no sample produced a usable subset".into()));
        }
        let epoch_loss = dpp_loss(&params, &items, config.tradeoff)?;
        trace.push(epoch_loss.value);
        flagged += epoch_loss.flagged;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut picked: Vec<usize> = chunk.to_vec();
            picked.sort_unstable();
            let batch: Vec<DppItem> = picked.iter().map(|&i| items[i].clone()).collect();
            let (_, grad) = dpp_loss_and_grad(&params, &batch, config.tradeoff)?;
            adam.step(&mut params.projection, &grad);
        }
    }
    let params = RetrieverParams::new(params.projection, init.version + 1)?;
    Ok(DppTrainOutcome {
        params,
        loss_trace: trace,
        flagged,
    })
}

/// Selected bank indices in prompt order (ascending similarity to the query).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    pub log_det: f64,
}

/// Greedy MAP over the bank conditioned on the query, then sorted so the
/// most similar example sits last, next to the query.
pub fn retrieve(
    params: &RetrieverParams,
    bank: &ExampleBank,
    query_base: ArrayView1<f64>,
    k: usize,
    config: &DppConfig,
) -> Result<Retrieval> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if k > bank.len() {
        return Err(Error::Parameter(format!(
            "K = {k} exceeds merged bank size {}",
            bank.len()
        )));
    }
    let rows = bank.embeddings()?;
    let q = embed(params, query_base)?;
    let e = params.embed_rows(rows.view())?;
    let candidates: Vec<usize> = match config.shortlist {
        Some(m) => top_similar(&e, &q, None, m.max(k)),
        None => (0..bank.len()).collect(),
    };
    let units = e.select(Axis(0), &candidates);
    let kernel = kernel_from_units(&units, &q, config.tradeoff)?;
    let map = greedy_map(&kernel, k)?;
    let log_det = map.log_det();
    let mut chosen: Vec<(usize, f64)> = map
        .selected
        .iter()
        .map(|&p| (candidates[p], units.row(p).dot(&q)))
        .collect();
    chosen.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(Retrieval {
        indices: chosen.iter().map(|c| c.0).collect(),
        similarities: chosen.iter().map(|c| c.1).collect(),
        log_det,
    })
}

/// Plain top-K by similarity, in the same ascending prompt order.
pub fn retrieve_top_k(
    params: &RetrieverParams,
    bank: &ExampleBank,
    query_base: ArrayView1<f64>,
    k: usize,
) -> Result<Retrieval> {
    if k == 0 || k > bank.len() {
        return Err(Error::Parameter(format!("K = {k} must be within 1..={}", bank.len())));
    }
    let mut ranked = crate::retriever::rank_by_similarity(params, bank, query_base)?;
    ranked.truncate(k);
    let rows = bank.embeddings()?;
    let units = params.embed_rows(
        rows.select(Axis(0), &ranked.iter().map(|r| r.0).collect::<Vec<_>>())
            .view(),
    )?;
    let q = embed(params, query_base)?;
    let kernel = kernel_from_units(&units, &q, 1.0)?;
    let log_det = log_det(&kernel, &(0..k).collect::<Vec<_>>())?;
    ranked.reverse();
    Ok(Retrieval {
        indices: ranked.iter().map(|r| r.0).collect(),
        similarities: ranked.iter().map(|r| r.1).collect(),
        log_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::test_support::{random_matrix, random_vector};
    use ndarray::array;
    use rand::Rng;

    fn random_kernel(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DppKernel {
        let p = RetrieverParams::new(random_matrix(rng, d, d), 0).unwrap();
        build_kernel(&p, random_matrix(rng, n, d).view(), random_vector(rng, d).view(), 1.0).unwrap()
    }

    /// Naive greedy: full jittered log-det recomputation for every candidate.
    fn naive_greedy(kernel: &DppKernel, k: usize) -> MapSelection {
        let mut sel: Vec<usize> = Vec::new();
        let mut gains = Vec::new();
        let mut current = 0.0;
        for _ in 0..k {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..kernel.len() {
                if sel.contains(&i) {
                    continue;
                }
                let mut s = sel.clone();
                s.push(i);
                let v = log_det(kernel, &s).unwrap();
                if v == f64::NEG_INFINITY {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let Some((i, v)) = best else { break };
            gains.push(v - current);
            current = v;
            sel.push(i);
        }
        MapSelection { selected: sel, gains }
    }

    #[test]
    fn duplicate_rows_make_singular_pairs() {
        let p = RetrieverParams::identity(2);
        let k = build_kernel(
            &p,
            array![[1.0, 0.5], [1.0, 0.5], [0.0, 1.0]].view(),
            array![1.0, 0.0].view(),
            1.0,
        )
        .unwrap();
        assert!((k.similarity[[0, 1]] - 1.0).abs() < 1e-15);
        // det is zero up to the jitter
        assert!(log_det(&k, &[0, 1]).unwrap() < -15.0);
        let sel = greedy_map(&k, 2).unwrap();
        assert!(!(sel.selected.contains(&0) && sel.selected.contains(&1)));
    }

    #[test]
    fn singleton_log_det_is_log_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(&mut rng, 5, 4);
        for i in 0..5 {
            let r = k.relevance[i];
            assert!((k.z[[i, i]] - r * r).abs() < 1e-12);
            assert!((log_det(&k, &[i]).unwrap() - (k.z[[i, i]] + JITTER).ln()).abs() < 1e-12);
        }
        assert_eq!(log_det(&k, &[]).unwrap(), 0.0);
        assert!(log_det(&k, &[7]).is_err());
        assert!(log_det(&k, &[1, 1]).is_err());
    }

    #[test]
    fn kernel_matches_entrywise_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 5;
        let w = random_matrix(&mut rng, d, d);
        let rows = random_matrix(&mut rng, 6, d);
        let x = random_vector(&mut rng, d);
        let p = RetrieverParams::new(w.clone(), 0).unwrap();
        let k = build_kernel(&p, rows.view(), x.view(), 0.7).unwrap();
        let unit = |v: Array1<f64>| {
            let n = v.dot(&v).sqrt();
            v / n
        };
        let q = unit(w.dot(&x));
        for i in 0..6 {
            let ei = unit(w.dot(&rows.row(i)));
            for j in 0..6 {
                let ej = unit(w.dot(&rows.row(j)));
                let want = (0.7 * ei.dot(&q)).exp() * ei.dot(&ej) * (0.7 * ej.dot(&q)).exp();
                assert!((k.z[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_kernel_picks_largest_first() {
        let k = DppKernel::from_matrix(Array2::from_diag(&array![0.5, 3.0, 1.0, 2.0])).unwrap();
        assert_eq!(greedy_map(&k, 2).unwrap().selected, vec![1, 3]);
        assert!(greedy_map(&k, 5).is_err());
        assert!(greedy_map(&k, 0).is_err());
    }

    fn exhaustive_best(kernel: &DppKernel, k: usize) -> f64 {
        fn walk(kernel: &DppKernel, k: usize, start: usize, cur: &mut Vec<usize>, best: &mut f64) {
            if cur.len() == k {
                *best = best.max(log_det(kernel, cur).unwrap());
                return;
            }
            for i in start..kernel.len() {
                cur.push(i);
                walk(kernel, k, i + 1, cur, best);
                cur.pop();
            }
        }
        let mut best = f64::NEG_INFINITY;
        walk(kernel, k, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn greedy_reaches_exhaustive_optimum_on_dominant_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let n = rng.random_range(3..=10);
            let k = rng.random_range(1..=3);
            // distinct diagonal levels 1..=n, off-diagonal mass far below the gaps
            let mut levels: Vec<f64> = (1..=n).map(|v| v as f64).collect();
            for i in (1..n).rev() {
                levels.swap(i, rng.random_range(0..=i));
            }
            let b = random_matrix(&mut rng, n, n + 2);
            let z = Array2::from_diag(&Array1::from(levels)) + b.dot(&b.t()) * 1e-4;
            let kernel = DppKernel::from_matrix(z).unwrap();
            let greedy = greedy_map(&kernel, k).unwrap().log_det();
            let best = exhaustive_best(&kernel, k);
            assert!(greedy >= best - 1e-9, "greedy {greedy} below optimum {best}");
        }
    }

    #[test]
    fn greedy_never_beats_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..40 {
            let n = rng.random_range(3..=10);
            let k = rng.random_range(1..=3);
            let kernel = random_kernel(&mut rng, n, 6);
            let greedy = greedy_map(&kernel, k).unwrap();
            if greedy.selected.len() == k {
                assert!(greedy.log_det() <= exhaustive_best(&kernel, k) + 1e-9);
            }
        }
    }

    #[test]
    fn greedy_matches_naive_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let k = random_kernel(&mut rng, 12, 6);
            let fast = greedy_map(&k, 4).unwrap();
            let slow = naive_greedy(&k, 4);
            assert_eq!(fast.selected, slow.selected);
            for (a, b) in fast.gains.iter().zip(&slow.gains) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn greedy_stops_when_all_additions_are_singular() {
        let k = DppKernel::from_matrix(Array2::zeros((3, 3)) - Array2::<f64>::eye(3)).unwrap();
        assert!(greedy_map(&k, 2).unwrap().selected.is_empty());
    }

    fn random_item(rng: &mut ChaCha8Rng, d: usize, n: usize, k: usize, negatives: usize) -> DppItem {
        let subset = |rng: &mut ChaCha8Rng| index::sample(rng, n, k).into_vec();
        DppItem {
            query: random_vector(rng, d),
            pool: random_matrix(rng, n, d),
            subsets: SubsetSample {
                sample: 0,
                positive: subset(rng),
                negatives: (0..negatives).map(|_| subset(rng)).collect(),
            },
        }
    }

    #[test]
    fn equal_subsets_give_zero_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut item = random_item(&mut rng, 4, 6, 2, 1);
        item.subsets.negatives = vec![item.subsets.positive.clone()];
        let p = RetrieverParams::identity(4);
        assert_eq!(dpp_loss(&p, &[item], 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        let p = RetrieverParams::identity(2);
        // orthogonal pair beats a near-duplicate pair
        let item = DppItem {
            query: array![1.0, 1.0],
            pool: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.01]],
            subsets: SubsetSample {
                sample: 0,
                positive: vec![0, 1],
                negatives: vec![vec![0, 2]],
            },
        };
        assert_eq!(dpp_loss(&p, &[item], 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn loss_matches_log_det_recomputation_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, n, k) = (6, 10, 3);
        let mut checked = 0;
        while checked < 5 {
            let w = random_matrix(&mut rng, d, d);
            let p = RetrieverParams::new(w.clone(), 0).unwrap();
            let item = random_item(&mut rng, d, n, k, 2);
            let kernel = build_kernel(&p, item.pool.view(), item.query.view(), 1.0).unwrap();
            let pos = log_det(&kernel, &item.subsets.positive).unwrap();
            let margins: Vec<f64> = item
                .subsets
                .negatives
                .iter()
                .map(|neg| log_det(&kernel, neg).unwrap() - pos)
                .collect();
            // stay away from the hinge kink so finite differences are meaningful
            if margins.iter().any(|m| m.abs() < 1e-3) || margins.iter().all(|&m| m <= 0.0) {
                continue;
            }
            let want: f64 = margins.iter().map(|m| m.max(0.0)).sum();
            let items = vec![item];
            let (loss, grad) = dpp_loss_and_grad(&p, &items, 1.0).unwrap();
            assert!((loss.value - want).abs() < 1e-9);
            let numeric = central_difference(&w, 1e-5, |m| {
                dpp_loss(&RetrieverParams::new(m.clone(), 0).unwrap(), &items, 1.0)
                    .unwrap()
                    .value
            });
            assert!(
                max_relative_error(&grad, &numeric) < 1e-4,
                "{}",
                max_relative_error(&grad, &numeric)
            );
            checked += 1;
        }
    }

    #[test]
    fn retrieve_k1_is_most_relevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let rows = random_matrix(&mut rng, 10, d);
        let bank = crate::test_support::bank_with_rows(rows.clone());
        let p = RetrieverParams::new(random_matrix(&mut rng, d, d), 0).unwrap();
        let x = random_vector(&mut rng, d);
        let got = retrieve(&p, &bank, x.view(), 1, &DppConfig::default()).unwrap();
        let best = crate::retriever::rank_by_similarity(&p, &bank, x.view()).unwrap()[0].0;
        assert_eq!(got.indices, vec![best]);
        assert!(retrieve(&p, &bank, x.view(), 11, &DppConfig::default()).is_err());
    }

    #[test]
    fn retrieve_orders_greedy_set_by_ascending_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 5;
        let rows = random_matrix(&mut rng, 10, d);
        let bank = crate::test_support::bank_with_rows(rows.clone());
        let p = RetrieverParams::new(random_matrix(&mut rng, d, d), 0).unwrap();
        let x = random_vector(&mut rng, d);
        let got = retrieve(&p, &bank, x.view(), 3, &DppConfig::default()).unwrap();
        let kernel = build_kernel(&p, rows.view(), x.view(), 1.0).unwrap();
        let mut greedy = greedy_map(&kernel, 3).unwrap().selected;
        let mut set = got.indices.clone();
        greedy.sort_unstable();
        set.sort_unstable();
        assert_eq!(set, greedy);
        let q = embed(&p, x.view()).unwrap();
        let sims: Vec<f64> = got
            .indices
            .iter()
            .map(|&i| embed(&p, rows.row(i)).unwrap().dot(&q))
            .collect();
        assert!(sims.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in sims.iter().zip(&got.similarities) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_hyperparameters() {
        let c = DppConfig::default();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.k, 16);
        assert_eq!(c.subsets, 8);
        assert_eq!(c.pool, 100);
        assert_eq!(c.tradeoff, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn kernels_are_psd(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..10);
            let k = random_kernel(&mut rng, n, 4);
            proptest::prop_assert!(linalg::cholesky(&linalg::add_jitter(&k.z, JITTER)).is_some()
                // rank-deficient when n > d: jitter keeps the factorisation alive
                || n > 4);
            for i in 0..n {
                for j in 0..n {
                    proptest::prop_assert!((k.z[[i, j]] - k.z[[j, i]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn loss_ignores_negative_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let item = random_item(&mut rng, 4, 8, 3, 4);
            let p = RetrieverParams::new(random_matrix(&mut rng, 4, 4), 0).unwrap();
            let mut shuffled = item.clone();
            shuffled.subsets.negatives.shuffle(&mut rng);
            for neg in shuffled.subsets.negatives.iter_mut() {
                neg.shuffle(&mut rng);
            }
            let a = dpp_loss(&p, &[item], 1.0).unwrap().value;
            let b = dpp_loss(&p, &[shuffled], 1.0).unwrap().value;
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

//! Ranking and contrastive losses over nested embeddings.
//!
//! Every loss is evaluated at one prefix dimension `m` and returns analytic
//! gradients with respect to the raw (unnormalized) embedding entries.
//! [`mrl_compose`] sums a task loss over a [`MrlConfig`] with per-dimension
//! weights, so entry `t` of a gradient collects contributions from every
//! member dimension `m > t`.
//!
//! Gradients are laid out as one full-length vector per input embedding:
//!
//! * [`TripletBatch`]: for each query, the query, then its positives, then
//!   its negatives.
//! * [`PairBatch`]: for each pair, the left then the right embedding.
//! * [`multitask_step_loss`]: the triplet layout followed by the pair layout.

mod gradcheck;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nested::{l2_norm, DimSet, NestedEmbedding, ZERO_NORM_EPS};

pub use gradcheck::{grad_check, grad_check_report, GradCheck, Probe, BREAKPOINT_SKIP};

/// Default hinge margin for the ranking loss.
pub const DEFAULT_MARGIN: f64 = 0.75;
/// Default distance margin for the online contrastive loss.
pub const DEFAULT_MARGIN_C: f64 = 0.5;

const SIG_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn sig_mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Query/positive/negative embeddings for the hinge ranking loss.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    queries: Vec<NestedEmbedding>,
    positives: Vec<Vec<NestedEmbedding>>,
    negatives: Vec<Vec<NestedEmbedding>>,
}

fn check_same_dims<'a>(
    mut it: impl Iterator<Item = &'a NestedEmbedding>,
) -> Result<Option<DimSet>> {
    let Some(first) = it.next() else {
        return Ok(None);
    };
    let dims = first.dims().clone();
    for e in it {
        if e.dims() != &dims {
            return Err(Error::Shape(format!(
                "batch mixes dimension sets {:?} and {:?}",
                dims,
                e.dims()
            )));
        }
    }
    Ok(Some(dims))
}

impl TripletBatch {
    pub fn new(
        queries: Vec<NestedEmbedding>,
        positives: Vec<Vec<NestedEmbedding>>,
        negatives: Vec<Vec<NestedEmbedding>>,
    ) -> Result<Self> {
        if positives.len() != queries.len() || negatives.len() != queries.len() {
            return Err(Error::Shape(format!(
                "{} queries, {} positive lists, {} negative lists",
                queries.len(),
                positives.len(),
                negatives.len()
            )));
        }
        for (q, (p, n)) in positives.iter().zip(&negatives).enumerate() {
            if p.is_empty() || n.is_empty() {
                return Err(Error::EmptyBatch(format!(
                    "query {q} has {} positives and {} negatives",
                    p.len(),
                    n.len()
                )));
            }
        }
        check_same_dims(
            queries
                .iter()
                .chain(positives.iter().flatten())
                .chain(negatives.iter().flatten()),
        )?;
        Ok(TripletBatch {
            queries,
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[NestedEmbedding] {
        &self.queries
    }

    pub fn positives(&self) -> &[Vec<NestedEmbedding>] {
        &self.positives
    }

    pub fn negatives(&self) -> &[Vec<NestedEmbedding>] {
        &self.negatives
    }

    /// Number of embeddings, i.e. the length of the gradient list.
    pub fn slot_count(&self) -> usize {
        self.queries.len()
            + self.positives.iter().map(Vec::len).sum::<usize>()
            + self.negatives.iter().map(Vec::len).sum::<usize>()
    }

    /// Embeddings in gradient-layout order.
    pub fn embeddings(&self) -> Vec<&NestedEmbedding> {
        let mut out = Vec::with_capacity(self.slot_count());
        for q in 0..self.queries.len() {
            out.push(&self.queries[q]);
            out.extend(self.positives[q].iter());
            out.extend(self.negatives[q].iter());
        }
        out
    }

    fn full_dim(&self) -> Option<usize> {
        self.queries.first().map(NestedEmbedding::full_dim)
    }
}

/// Labeled embedding pairs for the online contrastive loss. A `true` label
/// marks a central (matching-intent) pair.
#[derive(Clone, Debug)]
pub struct PairBatch {
    left: Vec<NestedEmbedding>,
    right: Vec<NestedEmbedding>,
    labels: Vec<bool>,
}

impl PairBatch {
    pub fn new(left: Vec<NestedEmbedding>, right: Vec<NestedEmbedding>, labels: Vec<bool>) -> Result<Self> {
        if left.len() != right.len() || left.len() != labels.len() {
            return Err(Error::Shape(format!(
                "pair batch lists have lengths {}, {}, {}",
                left.len(),
                right.len(),
                labels.len()
            )));
        }
        check_same_dims(left.iter().chain(right.iter()))?;
        Ok(PairBatch { left, right, labels })
    }

    pub fn empty() -> Self {
        PairBatch {
            left: Vec::new(),
            right: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn slot_count(&self) -> usize {
        2 * self.labels.len()
    }

    pub fn embeddings(&self) -> Vec<&NestedEmbedding> {
        self.left
            .iter()
            .zip(&self.right)
            .flat_map(|(l, r)| [l, r])
            .collect()
    }

    fn full_dim(&self) -> Option<usize> {
        self.left.first().map(NestedEmbedding::full_dim)
    }
}

/// Nested dimensions and their loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrlConfig {
    dims: DimSet,
    weights: Vec<f64>,
}

impl MrlConfig {
    /// `weights[i]` belongs to `dims.as_slice()[i]` (descending order).
    pub fn new(dims: DimSet, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "{} weights for {} dimensions",
                weights.len(),
                dims.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!("dimension weight {w} is not positive")));
        }
        Ok(MrlConfig { dims, weights })
    }

    pub fn uniform(dims: DimSet) -> Self {
        let weights = vec![1.0; dims.len()];
        MrlConfig { dims, weights }
    }

    pub fn dims(&self) -> &DimSet {
        &self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(m, c_m)` pairs in descending `m`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.dims.iter().zip(self.weights.iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossWarning {
    /// The contrastive term was requested but the pair batch was empty.
    EmptyPairBatch,
}

/// Loss value, its per-dimension breakdown and gradients.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    /// Unweighted task value at each dimension.
    pub per_dim: BTreeMap<usize, f64>,
    /// One full-length gradient per input embedding (see module docs).
    pub gradients: Vec<Vec<f64>>,
    /// Smallest distance from any hinge or selection threshold. Finite
    /// differences are unreliable when this is tiny.
    pub breakpoint_gap: f64,
    /// Fingerprint of which hinge terms were active and which pairs were
    /// selected. Equal fingerprints mean the same smooth piece.
    pub activity: u64,
    pub warnings: Vec<LossWarning>,
}

impl LossOutput {
    fn zero(slots: usize, full_dim: usize) -> Self {
        LossOutput {
            value: 0.0,
            per_dim: BTreeMap::new(),
            gradients: vec![vec![0.0; full_dim]; slots],
            breakpoint_gap: f64::INFINITY,
            activity: SIG_SEED,
            warnings: Vec::new(),
        }
    }

    fn add_scaled(&mut self, other: &LossOutput, weight: f64) {
        for (g, o) in self.gradients.iter_mut().zip(&other.gradients) {
            for (x, y) in g.iter_mut().zip(o) {
                *x += weight * y;
            }
        }
        self.breakpoint_gap = self.breakpoint_gap.min(other.breakpoint_gap);
        self.activity = sig_mix(self.activity, other.activity);
    }
}

/// A loss defined at a single prefix dimension.
pub trait TaskLoss: Sync {
    type Batch: Sync;

    fn loss_at(&self, batch: &Self::Batch, m: usize) -> Result<LossOutput>;
}

/// Hinge ranking loss: for every (positive, negative) pair of a query,
/// `max(0, margin - cos(q, p) + cos(q, n))`, summed per query and averaged
/// over queries.
#[derive(Clone, Copy, Debug)]
pub struct MnrlHinge {
    pub margin: f64,
}

/// Contrastive loss over the hardest pairs of a batch.
///
/// With cosine distance `d = 1 - cos`, label-1 pairs farther than the
/// closest label-0 pair and label-0 pairs closer than the farthest label-1
/// pair are selected. The loss is the mean of `d^2` over selected positives
/// plus the mean of `max(0, margin - d)^2` over selected negatives. When only
/// one class is present, every pair of that class is selected.
#[derive(Clone, Copy, Debug)]
pub struct OnlineContrastive {
    pub margin: f64,
}

struct CosGrad {
    value: f64,
    da: Vec<f64>,
    db: Vec<f64>,
}

/// Cosine of the `m`-prefixes of `a` and `b` with its gradients.
fn cos_grad(a: &NestedEmbedding, b: &NestedEmbedding, m: usize) -> Result<CosGrad> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::ZeroVector);
    }
    let a = a.truncate(m)?;
    let b = b.truncate(m)?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > ZERO_NORM_EPS) || !(nb > ZERO_NORM_EPS) {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| (y / nb - dot * (x / na)) / na)
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / na - dot * (y / nb)) / nb)
        .collect();
    Ok(CosGrad {
        value: dot.clamp(-1.0, 1.0),
        da,
        db,
    })
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl TaskLoss for MnrlHinge {
    type Batch = TripletBatch;

    fn loss_at(&self, batch: &TripletBatch, m: usize) -> Result<LossOutput> {
        mnrl_hinge(batch, self.margin, m)
    }
}

impl TaskLoss for OnlineContrastive {
    type Batch = PairBatch;

    fn loss_at(&self, batch: &PairBatch, m: usize) -> Result<LossOutput> {
        ocl(batch, self.margin, m)
    }
}

pub fn mnrl_hinge(batch: &TripletBatch, margin: f64, m: usize) -> Result<LossOutput> {
    if !(0.0..=2.0).contains(&margin) {
        return Err(Error::InvalidConfig(format!("margin {margin} outside [0, 2]")));
    }
    let Some(full) = batch.full_dim() else {
        return Err(Error::EmptyBatch("triplet batch has no queries".into()));
    };
    let mut out = LossOutput::zero(batch.slot_count(), full);
    let inv_q = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut slot = 0;
    for q in 0..batch.len() {
        let query = &batch.queries[q];
        let pos: Vec<CosGrad> = batch.positives[q]
            .iter()
            .map(|p| cos_grad(query, p, m))
            .collect::<Result<_>>()?;
        let neg: Vec<CosGrad> = batch.negatives[q]
            .iter()
            .map(|n| cos_grad(query, n, m))
            .collect::<Result<_>>()?;
        let mut pos_active = vec![0usize; pos.len()];
        let mut neg_active = vec![0usize; neg.len()];
        let mut query_loss = 0.0;
        for (i, p) in pos.iter().enumerate() {
            for (j, n) in neg.iter().enumerate() {
                let arg = margin - p.value + n.value;
                out.breakpoint_gap = out.breakpoint_gap.min(arg.abs());
                let active = arg > 0.0;
                out.activity = sig_mix(out.activity, active as u64);
                if active {
                    query_loss += arg;
                    pos_active[i] += 1;
                    neg_active[j] += 1;
                }
            }
        }
        total += query_loss;

        let q_slot = slot;
        let p_base = q_slot + 1;
        let n_base = p_base + pos.len();
        for (i, p) in pos.iter().enumerate() {
            if pos_active[i] > 0 {
                let w = -(pos_active[i] as f64) * inv_q;
                axpy(&mut out.gradients[q_slot][..m], w, &p.da);
                axpy(&mut out.gradients[p_base + i][..m], w, &p.db);
            }
        }
        for (j, n) in neg.iter().enumerate() {
            if neg_active[j] > 0 {
                let w = neg_active[j] as f64 * inv_q;
                axpy(&mut out.gradients[q_slot][..m], w, &n.da);
                axpy(&mut out.gradients[n_base + j][..m], w, &n.db);
            }
        }
        slot = n_base + neg.len();
    }
    out.value = total * inv_q;
    out.per_dim.insert(m, out.value);
    Ok(out)
}

pub fn ocl(batch: &PairBatch, margin_c: f64, m: usize) -> Result<LossOutput> {
    if !(margin_c > 0.0 && margin_c < 2.0) {
        return Err(Error::InvalidConfig(format!("contrastive margin {margin_c} outside (0, 2)")));
    }
    let Some(full) = batch.full_dim() else {
        return Err(Error::EmptyBatch("pair batch has no pairs".into()));
    };
    let mut out = LossOutput::zero(batch.slot_count(), full);
    let cos: Vec<CosGrad> = batch
        .left
        .iter()
        .zip(&batch.right)
        .map(|(l, r)| cos_grad(l, r, m))
        .collect::<Result<_>>()?;
    let dist: Vec<f64> = cos.iter().map(|c| 1.0 - c.value).collect();

    let min_neg = batch
        .labels
        .iter()
        .zip(&dist)
        .filter(|(l, _)| !**l)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let max_pos = batch
        .labels
        .iter()
        .zip(&dist)
        .filter(|(l, _)| **l)
        .map(|(_, d)| *d)
        .fold(f64::NEG_INFINITY, f64::max);
    let both_classes = min_neg.is_finite() && max_pos.is_finite();

    let mut selected_pos = Vec::new();
    let mut selected_neg = Vec::new();
    for (i, (&label, &d)) in batch.labels.iter().zip(&dist).enumerate() {
        let selected = if label {
            if both_classes {
                out.breakpoint_gap = out.breakpoint_gap.min((d - min_neg).abs());
                d > min_neg
            } else {
                true
            }
        } else if both_classes {
            out.breakpoint_gap = out.breakpoint_gap.min((d - max_pos).abs());
            d < max_pos
        } else {
            true
        };
        out.activity = sig_mix(out.activity, selected as u64);
        if selected {
            if label {
                selected_pos.push(i);
            } else {
                selected_neg.push(i);
            }
        }
    }

    let mut value = 0.0;
    if !selected_pos.is_empty() {
        let inv = 1.0 / selected_pos.len() as f64;
        let mut sum = 0.0;
        for &i in &selected_pos {
            let d = dist[i];
            sum += d * d;
            // d(d^2)/dx = 2d * (-dcos/dx)
            let w = -2.0 * d * inv;
            axpy(&mut out.gradients[2 * i][..m], w, &cos[i].da);
            axpy(&mut out.gradients[2 * i + 1][..m], w, &cos[i].db);
        }
        value += sum * inv;
    }
    if !selected_neg.is_empty() {
        let inv = 1.0 / selected_neg.len() as f64;
        let mut sum = 0.0;
        for &i in &selected_neg {
            let gap = margin_c - dist[i];
            out.breakpoint_gap = out.breakpoint_gap.min(gap.abs());
            out.activity = sig_mix(out.activity, (gap > 0.0) as u64);
            if gap > 0.0 {
                sum += gap * gap;
                // d(gap^2)/dx = 2 gap * dcos/dx
                let w = 2.0 * gap * inv;
                axpy(&mut out.gradients[2 * i][..m], w, &cos[i].da);
                axpy(&mut out.gradients[2 * i + 1][..m], w, &cos[i].db);
            }
        }
        value += sum * inv;
    }
    out.value = value;
    out.per_dim.insert(m, value);
    Ok(out)
}

/// Weighted sum of a task loss over every dimension of `config`.
///
/// Dimensions are evaluated in parallel and summed in descending order.
pub fn mrl_compose<T: TaskLoss>(task: &T, batch: &T::Batch, config: &MrlConfig) -> Result<LossOutput> {
    let parts: Vec<LossOutput> = config
        .dims()
        .as_slice()
        .par_iter()
        .map(|&m| task.loss_at(batch, m).map_err(|e| e.at_dim(m)))
        .collect::<Result<_>>()?;
    let first = &parts[0];
    let full = first.gradients.first().map_or(0, Vec::len);
    let mut out = LossOutput::zero(first.gradients.len(), full);
    for ((m, weight), part) in config.iter().zip(&parts) {
        out.value += weight * part.value;
        out.per_dim.insert(m, part.value);
        out.add_scaled(part, weight);
    }
    Ok(out)
}

/// Combined ranking + contrastive objective:
/// `mrl_compose(hinge) + lambda_ocl * mrl_compose(ocl)`.
///
/// An empty pair batch contributes zero and sets
/// [`LossWarning::EmptyPairBatch`] when `lambda_ocl > 0`.
pub fn multitask_step_loss(
    triplets: &TripletBatch,
    pairs: &PairBatch,
    config: &MrlConfig,
    margin: f64,
    margin_c: f64,
    lambda_ocl: f64,
) -> Result<LossOutput> {
    if !(lambda_ocl >= 0.0) || !lambda_ocl.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda_ocl {lambda_ocl} must be >= 0")));
    }
    let ranking = mrl_compose(&MnrlHinge { margin }, triplets, config)?;
    let mut out = ranking;

    if pairs.is_empty() {
        if lambda_ocl > 0.0 {
            out.warnings.push(LossWarning::EmptyPairBatch);
        }
        let full = out.gradients.first().map_or(0, Vec::len);
        out.gradients.extend(std::iter::repeat_n(vec![0.0; full], pairs.slot_count()));
        return Ok(out);
    }

    let contrastive = mrl_compose(&OnlineContrastive { margin: margin_c }, pairs, config)?;
    out.value += lambda_ocl * contrastive.value;
    for (m, v) in &contrastive.per_dim {
        *out.per_dim.get_mut(m).expect("same dimension set") += lambda_ocl * v;
    }
    out.gradients.extend(
        contrastive
            .gradients
            .iter()
            .map(|g| g.iter().map(|x| lambda_ocl * x).collect::<Vec<_>>()),
    );
    out.breakpoint_gap = out.breakpoint_gap.min(contrastive.breakpoint_gap);
    out.activity = sig_mix(out.activity, contrastive.activity);
    out.warnings.extend(contrastive.warnings);
    Ok(out)
}

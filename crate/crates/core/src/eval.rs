//! Per-dimension retrieval evaluation, delta tables and score analysis.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_judgments, RelevanceRecord};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::index::{Document, PrefixIndex};
use crate::metrics::{mrr_at_k, ndcg_at_k, precision_recall_at_k, Gain};
use crate::nested::DimSet;

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];
pub const DEFAULT_CORPUS_CAP: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub dims: DimSet,
    pub ks: Vec<usize>,
    pub corpus_cap: usize,
    /// Drives corpus subsampling when the cap is hit.
    pub seed: u64,
    #[serde(default)]
    pub gain: Gain,
}

impl EvalConfig {
    pub fn new(dims: DimSet) -> Self {
        EvalConfig {
            dims,
            ks: DEFAULT_KS.to_vec(),
            corpus_cap: DEFAULT_CORPUS_CAP,
            seed: 0,
            gain: Gain::Binary,
        }
    }

    fn validate(&self, model: &EncoderModel) -> Result<()> {
        if !self.dims.is_subset_of(model.dims()) {
            return Err(Error::InvalidConfig(format!(
                "evaluation dims {} not all valid for model dims {}",
                self.dims,
                model.dims()
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig("ks must be non-empty and >= 1".into()));
        }
        if self.corpus_cap == 0 {
            return Err(Error::InvalidConfig("corpus cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dim: usize,
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Ordered by dimension (descending) then `k` (ascending).
    pub rows: Vec<MetricRow>,
    pub query_count: usize,
    pub corpus_size: usize,
}

impl MetricsReport {
    pub fn get(&self, dim: usize, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.dim == dim && r.k == k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,k,precision,recall,ndcg,mrr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.dim, r.k, r.precision, r.recall, r.ndcg, r.mrr
            );
        }
        out
    }
}

/// Keeps every relevant title and fills the rest of the cap with a seeded
/// sample of the others, preserving corpus order. If the relevant titles
/// alone exceed the cap they are all kept.
pub fn cap_corpus(corpus: Vec<Document>, relevant: &HashSet<&str>, cap: usize, seed: u64) -> Vec<Document> {
    if corpus.len() <= cap {
        return corpus;
    }
    let others: Vec<usize> = (0..corpus.len())
        .filter(|&i| !relevant.contains(corpus[i].id.as_str()))
        .collect();
    let keep_relevant = corpus.len() - others.len();
    let room = cap.saturating_sub(keep_relevant).min(others.len());
    if keep_relevant > cap {
        log::warn!("{keep_relevant} relevant titles exceed the corpus cap {cap}; keeping all of them");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<usize> = sample(&mut rng, others.len(), room).into_iter().map(|i| others[i]).collect();
    chosen.extend((0..corpus.len()).filter(|&i| relevant.contains(corpus[i].id.as_str())));
    corpus
        .into_iter()
        .enumerate()
        .filter(|(i, _)| chosen.contains(i))
        .map(|(_, d)| d)
        .collect()
}

/// Embeds queries and a corpus of all distinct judged titles, then scores
/// exact top-k retrieval at every requested dimension.
pub fn sequential_evaluate(model: &EncoderModel, records: &[RelevanceRecord], config: &EvalConfig) -> Result<MetricsReport> {
    config.validate(model)?;
    let split = split_judgments(records);
    if split.judgments.is_empty() {
        return Err(Error::NoUsableQueries("no query has a title graded above 3".into()));
    }
    let relevant: HashSet<&str> = split
        .judgments
        .values()
        .flat_map(|j| j.relevant.iter().map(String::as_str))
        .collect();
    let corpus = cap_corpus(split.corpus.clone(), &relevant, config.corpus_cap, config.seed);
    let index = PrefixIndex::build(model, corpus)?;

    let judged: Vec<_> = split.judgments.values().collect();
    let queries: Vec<&str> = judged.iter().map(|j| j.query.as_str()).collect();
    let query_emb = model.encode_batch(&queries)?;
    let max_k = *config.ks.iter().max().expect("validated non-empty");

    let mut rows = Vec::new();
    for m in config.dims.iter() {
        // [query][k] -> (p, r, ndcg, mrr)
        let per_query: Vec<Vec<[f64; 4]>> = judged
            .par_iter()
            .zip(&query_emb)
            .map(|(j, q)| -> Result<Vec<[f64; 4]>> {
                let ranked: Vec<&str> = if q.is_degenerate() {
                    Vec::new()
                } else {
                    index
                        .search_exact(q, m, max_k)?
                        .into_iter()
                        .map(|h| index.docs()[h.row].id.as_str())
                        .collect()
                };
                config
                    .ks
                    .iter()
                    .map(|&k| {
                        let (p, r) = precision_recall_at_k(&ranked, &j.relevant, k)?;
                        let n = ndcg_at_k(&ranked, &j.relevant, &j.grades, k, config.gain)?;
                        let mr = mrr_at_k(&ranked, &j.relevant, k)?;
                        Ok([p, r, n, mr])
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let nq = per_query.len() as f64;
        for (ki, &k) in config.ks.iter().enumerate() {
            let mut sums = [0.0; 4];
            for q in &per_query {
                for (s, v) in sums.iter_mut().zip(q[ki]) {
                    *s += v;
                }
            }
            rows.push(MetricRow {
                dim: m,
                k,
                precision: sums[0] / nq,
                recall: sums[1] / nq,
                ndcg: sums[2] / nq,
                mrr: sums[3] / nq,
            });
        }
    }
    rows.sort_by(|a, b| b.dim.cmp(&a.dim).then(a.k.cmp(&b.k)));
    Ok(MetricsReport {
        rows,
        query_count: judged.len(),
        corpus_size: index.len(),
    })
}

/// Relative change `(candidate - baseline) / baseline`; `None` when the
/// baseline is zero.
pub fn relative_delta(candidate: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((candidate - baseline) / baseline)
    }
}

/// Signed percentage with two decimals, or `n/a`.
pub fn format_delta(delta: Option<f64>) -> String {
    match delta {
        Some(d) => format!("{:+.2}%", d * 100.0),
        None => "n/a".to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dim: usize,
    pub k: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub mrr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub rows: Vec<DeltaRow>,
}

impl DeltaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,k,precision,recall,ndcg,mrr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.dim,
                r.k,
                format_delta(r.precision),
                format_delta(r.recall),
                format_delta(r.ndcg),
                format_delta(r.mrr)
            );
        }
        out
    }
}

pub fn delta_report(candidate: &MetricsReport, baseline: &MetricsReport) -> Result<DeltaReport> {
    let grid = |r: &MetricsReport| r.rows.iter().map(|x| (x.dim, x.k)).collect::<BTreeSet<_>>();
    if grid(candidate) != grid(baseline) || candidate.rows.len() != baseline.rows.len() {
        return Err(Error::GridMismatch(format!(
            "candidate {:?} vs baseline {:?}",
            grid(candidate),
            grid(baseline)
        )));
    }
    let rows = candidate
        .rows
        .iter()
        .map(|c| {
            let b = baseline.get(c.dim, c.k).expect("same grid");
            DeltaRow {
                dim: c.dim,
                k: c.k,
                precision: relative_delta(c.precision, b.precision),
                recall: relative_delta(c.recall, b.recall),
                ndcg: relative_delta(c.ndcg, b.ndcg),
                mrr: relative_delta(c.mrr, b.mrr),
            }
        })
        .collect();
    Ok(DeltaReport { rows })
}

/// Subtracts `corpus_min` (the lowest similarity over the whole corpus for
/// this query) from each score.
pub fn normalize_scores(scores: &[f64], corpus_min: f64) -> Vec<f64> {
    scores.iter().map(|s| s - corpus_min).collect()
}

/// [`normalize_scores`] where `all_scores` is the full corpus score list.
pub fn normalize_against_corpus(all_scores: &[f64]) -> Vec<f64> {
    let min = all_scores.iter().copied().fold(f64::INFINITY, f64::min);
    normalize_scores(all_scores, min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{:.6},{:.6},{}", b.low, b.high, b.count);
        }
        out
    }
}

/// Equal-width histogram over `[-1, 1]`; 1.0 falls in the last bin.
pub fn score_histogram(scores: &[f64], bin_count: usize) -> Result<Histogram> {
    if bin_count == 0 {
        return Err(Error::InvalidConfig("bin count must be >= 1".into()));
    }
    let width = 2.0 / bin_count as f64;
    let mut bins: Vec<HistogramBin> = (0..bin_count)
        .map(|i| HistogramBin {
            low: -1.0 + i as f64 * width,
            high: if i + 1 == bin_count { 1.0 } else { -1.0 + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &s in scores {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::ScoreOutOfRange(s));
        }
        let i = (((s + 1.0) / width) as usize).min(bin_count - 1);
        bins[i].count += 1;
    }
    Ok(Histogram { bins })
}

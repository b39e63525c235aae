//! Ranking metrics at a cutoff `k`.
//!
//! All functions take the ranked ids best-first. Precision divides by `k`
//! even when fewer than `k` items were returned.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gain used by [`ndcg_at_k`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// 1 for relevant, 0 otherwise.
    #[default]
    Binary,
    /// `2^grade - 1` for relevant items, 0 otherwise.
    Graded,
}

fn check(k: usize, relevant: &BTreeSet<String>) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    Ok(())
}

fn hits<S: Borrow<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|id| relevant.contains::<str>((*id).borrow())).count()
}

pub fn precision_recall_at_k<S: Borrow<str>>(
    ranked: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<(f64, f64)> {
    check(k, relevant)?;
    let h = hits(ranked, relevant, k) as f64;
    Ok((h / k as f64, h / relevant.len() as f64))
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG with binary or graded gains. `grades` is only read for
/// [`Gain::Graded`].
pub fn ndcg_at_k<S: Borrow<str>>(
    ranked: &[S],
    relevant: &BTreeSet<String>,
    grades: &BTreeMap<String, u8>,
    k: usize,
    gain: Gain,
) -> Result<f64> {
    check(k, relevant)?;
    let gain_of = |id: &str| -> f64 {
        if !relevant.contains(id) {
            return 0.0;
        }
        match gain {
            Gain::Binary => 1.0,
            Gain::Graded => {
                let g = grades.get(id).copied().unwrap_or(1);
                2f64.powi(i32::from(g)) - 1.0
            }
        }
    };
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gain_of(id.borrow()) * discount(i + 1))
        .sum();
    let mut ideal: Vec<f64> = relevant.iter().map(|id| gain_of(id)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g * discount(i + 1))
        .sum();
    Ok(dcg / idcg)
}

/// Reciprocal rank of the first relevant item within the top `k`.
pub fn mrr_at_k<S: Borrow<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check(k, relevant)?;
    Ok(ranked
        .iter()
        .take(k)
        .position(|id| relevant.contains::<str>(id.borrow()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

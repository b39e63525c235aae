//! Nested (Matryoshka) embeddings and the prefix primitives built on them.
//!
//! A [`NestedEmbedding`] stores one full-length vector. Each dimension `m` in
//! its [`DimSet`] names a usable prefix: the first `m` entries form a
//! standalone embedding. Values are kept unnormalized; cosine similarity
//! normalizes each prefix on the fly.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Strictly descending set of valid prefix lengths. The first entry is the
/// full dimension.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DimSet(Arc<[usize]>);

impl DimSet {
    /// Builds a set from dimensions in any order. They are sorted descending;
    /// zeros, duplicates and empty input are rejected.
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let mut dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidDimSet("no dimensions given".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidDimSet("dimensions must be >= 1".into()));
        }
        dims.sort_unstable_by(|a, b| b.cmp(a));
        if dims.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidDimSet(format!("duplicate dimension in {dims:?}")));
        }
        Ok(DimSet(dims.into()))
    }

    /// The single-element set `{d}`.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(vec![d])
    }

    /// Largest dimension, i.e. the full embedding length.
    pub fn full(&self) -> usize {
        self.0[0]
    }

    pub fn smallest(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, m: usize) -> bool {
        self.0.contains(&m)
    }

    pub fn check(&self, m: usize) -> Result<()> {
        if self.contains(m) {
            Ok(())
        } else {
            Err(Error::InvalidDimension {
                dim: m,
                valid: self.to_vec(),
            })
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.0.to_vec()
    }

    /// Dimensions `<= m`; `m` itself must be a member.
    pub fn restrict_to(&self, m: usize) -> Result<DimSet> {
        self.check(m)?;
        let kept: Vec<usize> = self.iter().filter(|&d| d <= m).collect();
        Ok(DimSet(kept.into()))
    }

    /// True when every member of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &DimSet) -> bool {
        self.iter().all(|d| other.contains(d))
    }
}

impl TryFrom<Vec<usize>> for DimSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        DimSet::new(v)
    }
}

impl From<DimSet> for Vec<usize> {
    fn from(d: DimSet) -> Self {
        d.to_vec()
    }
}

impl fmt::Debug for DimSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl fmt::Display for DimSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// A full-length embedding whose designated prefixes are each usable on
/// their own.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedEmbedding {
    values: Vec<f64>,
    dims: DimSet,
    degenerate: bool,
}

impl NestedEmbedding {
    pub fn new(values: Vec<f64>, dims: DimSet) -> Result<Self> {
        if values.len() != dims.full() {
            return Err(Error::Shape(format!(
                "embedding has {} values but full dimension is {}",
                values.len(),
                dims.full()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i} is {}", values[i])));
        }
        Ok(NestedEmbedding {
            values,
            dims,
            degenerate: false,
        })
    }

    /// The all-zero embedding produced for input with no features. Any
    /// similarity against it is an error.
    pub fn degenerate(dims: DimSet) -> Self {
        NestedEmbedding {
            values: vec![0.0; dims.full()],
            dims,
            degenerate: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> &DimSet {
        &self.dims
    }

    pub fn full_dim(&self) -> usize {
        self.dims.full()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn truncate(&self, m: usize) -> Result<&[f64]> {
        self.dims.check(m)?;
        Ok(&self.values[..m])
    }

    /// Re-wraps the first `m` entries as an embedding of full dimension `m`,
    /// keeping only the member dimensions `<= m`.
    pub fn truncate_as_embedding(&self, m: usize) -> Result<NestedEmbedding> {
        let dims = self.dims.restrict_to(m)?;
        Ok(NestedEmbedding {
            values: self.values[..m].to_vec(),
            dims,
            degenerate: self.degenerate,
        })
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Result<NestedEmbedding> {
        NestedEmbedding::new(self.values.iter().map(|v| v * c).collect(), self.dims.clone())
    }
}

/// First `m` entries of `e`.
pub fn truncate(e: &NestedEmbedding, m: usize) -> Result<&[f64]> {
    e.truncate(m)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > ZERO_NORM_EPS) {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of two equal-length slices whose norms are already known.
///
/// Every cosine in the crate goes through here so that the index, the losses
/// and test oracles agree bit for bit on a given pair.
#[inline]
pub fn cosine_with_norms(a: &[f64], a_norm: f64, b: &[f64], b_norm: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / a_norm) * (y / b_norm))
        .sum();
    dot.clamp(-1.0, 1.0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > ZERO_NORM_EPS) || !(nb > ZERO_NORM_EPS) {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Cosine similarity of the `m`-dimensional prefixes of `a` and `b`.
pub fn cosine_prefix(a: &NestedEmbedding, b: &NestedEmbedding, m: usize) -> Result<f64> {
    if a.degenerate || b.degenerate {
        return Err(Error::ZeroVector);
    }
    cosine(a.truncate(m)?, b.truncate(m)?)
}

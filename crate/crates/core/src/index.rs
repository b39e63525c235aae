//! Prefix-readable embedding index with exact and two-stage search.
//!
//! One row-major `count x D` matrix of unnormalized f32 values serves every
//! nested dimension: a search at `m` reads only the first `m` columns and
//! normalizes them on the fly. Per-dimension row norms are cached lazily.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NEAR2IDX"
//! version    u32      1
//! D          u32
//! count      u64
//! dims       u16 count, then u32 each (descending)
//! degenerate ceil(count / 8) bytes, bit i of byte i/8 (LSB first)
//! vectors    count * D f32
//! doc table  count * (u16 id length, id bytes, u32 title length, title bytes)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{ByteReader, EncoderModel};
use crate::error::{Error, Result};
use crate::nested::{cosine_with_norms, l2_norm, DimSet, NestedEmbedding, ZERO_NORM_EPS};

pub const INDEX_MAGIC: &[u8; 8] = b"NEAR2IDX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchHit {
    pub row: usize,
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Hits plus the lowest score seen over the whole corpus for that query.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    pub min_score: Option<f64>,
}

/// Bytes needed to serve prefix-`m` queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub dim: usize,
    pub vector_bytes: u64,
    pub doc_table_bytes: u64,
}

#[derive(Debug)]
pub struct PrefixIndex {
    dims: DimSet,
    matrix: Vec<f32>,
    docs: Vec<Document>,
    degenerate: Vec<bool>,
    norms: Vec<OnceLock<Vec<f64>>>,
}

impl Clone for PrefixIndex {
    fn clone(&self) -> Self {
        PrefixIndex::from_parts(
            self.dims.clone(),
            self.matrix.clone(),
            self.docs.clone(),
            self.degenerate.clone(),
        )
    }
}

impl PartialEq for PrefixIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.docs == other.docs
            && self.degenerate == other.degenerate
            && self.matrix.len() == other.matrix.len()
            && self
                .matrix
                .iter()
                .zip(&other.matrix)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_unique(docs: &[Document]) -> Result<()> {
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::DuplicateId(d.id.clone()));
        }
    }
    Ok(())
}

impl PrefixIndex {
    fn from_parts(dims: DimSet, matrix: Vec<f32>, docs: Vec<Document>, degenerate: Vec<bool>) -> Self {
        let norms = (0..dims.len()).map(|_| OnceLock::new()).collect();
        PrefixIndex {
            dims,
            matrix,
            docs,
            degenerate,
            norms,
        }
    }

    /// Embeds every title with `model` in input order.
    pub fn build(model: &EncoderModel, docs: Vec<Document>) -> Result<Self> {
        let titles: Vec<&str> = docs.iter().map(|d| d.title.as_str()).collect();
        let embeddings = model.encode_batch(&titles)?;
        Self::from_embeddings(docs, &embeddings)
    }

    /// Builds from precomputed embeddings (rounded to f32 for storage).
    pub fn from_embeddings(docs: Vec<Document>, embeddings: &[NestedEmbedding]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyBatch("index needs at least one document".into()));
        }
        if docs.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} documents, {} embeddings",
                docs.len(),
                embeddings.len()
            )));
        }
        check_unique(&docs)?;
        let dims = embeddings[0].dims().clone();
        let d = dims.full();
        let mut matrix = Vec::with_capacity(docs.len() * d);
        let mut degenerate = Vec::with_capacity(docs.len());
        for e in embeddings {
            if e.dims() != &dims {
                return Err(Error::Shape("embeddings disagree on dimension set".into()));
            }
            matrix.extend(e.values().iter().map(|v| *v as f32));
            degenerate.push(e.is_degenerate());
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding overflowed f32".into()));
        }
        Ok(Self::from_parts(dims, matrix, docs, degenerate))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn full_dim(&self) -> usize {
        self.dims.full()
    }

    pub fn dims(&self) -> &DimSet {
        &self.dims
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn is_degenerate(&self, row: usize) -> bool {
        self.degenerate[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let d = self.full_dim();
        &self.matrix[row * d..(row + 1) * d]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    fn row_f64(&self, row: usize, m: usize) -> Vec<f64> {
        self.row(row)[..m].iter().map(|v| f64::from(*v)).collect()
    }

    /// Norms of every row's `m`-prefix, computed once per dimension.
    fn prefix_norms(&self, m: usize) -> Result<&[f64]> {
        let slot = self
            .dims
            .as_slice()
            .iter()
            .position(|&d| d == m)
            .ok_or_else(|| Error::InvalidDimension {
                dim: m,
                valid: self.dims.to_vec(),
            })?;
        Ok(self.norms[slot].get_or_init(|| {
            (0..self.len())
                .into_par_iter()
                .map(|r| l2_norm(&self.row_f64(r, m)))
                .collect()
        }))
    }

    fn usable(&self, row: usize, norms: &[f64]) -> bool {
        !self.degenerate[row] && norms[row] > ZERO_NORM_EPS
    }

    fn query_prefix<'q>(&self, query: &'q NestedEmbedding, m: usize) -> Result<(&'q [f64], f64)> {
        self.dims.check(m)?;
        let q = query.truncate(m)?;
        let qn = l2_norm(q);
        if query.is_degenerate() || !(qn > ZERO_NORM_EPS) {
            return Err(Error::ZeroVector);
        }
        Ok((q, qn))
    }

    fn score_rows(&self, q: &[f64], qn: f64, m: usize, rows: &[usize], norms: &[f64]) -> Vec<(usize, f64)> {
        rows.iter()
            .map(|&r| {
                let row = self.row_f64(r, m);
                (r, cosine_with_norms(q, qn, &row, norms[r]))
            })
            .collect()
    }

    fn to_hits(&self, mut scored: Vec<(usize, f64)>, k: usize) -> Vec<SearchHit> {
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (row, score))| SearchHit {
                row,
                id: self.docs[row].id.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    /// Exact top-`k` by cosine at prefix `m`. Ties go to the lower row.
    pub fn search_exact(&self, query: &NestedEmbedding, m: usize, k: usize) -> Result<Vec<SearchHit>> {
        Ok(self.search_exact_detailed(query, m, k)?.hits)
    }

    pub fn search_exact_detailed(&self, query: &NestedEmbedding, m: usize, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        let (q, qn) = self.query_prefix(query, m)?;
        let norms = self.prefix_norms(m)?;
        let rows: Vec<usize> = (0..self.len()).filter(|&r| self.usable(r, norms)).collect();
        let scored = self.score_rows(q, qn, m, &rows, norms);
        let min_score = scored.iter().map(|s| s.1).reduce(f64::min);
        Ok(SearchResult {
            hits: self.to_hits(scored, k),
            min_score,
        })
    }

    /// Shortlists `shortlist` rows at `m_low`, then re-ranks them at `m_high`.
    /// Reported scores are the `m_high` cosines.
    pub fn search_funnel(
        &self,
        query: &NestedEmbedding,
        m_low: usize,
        m_high: usize,
        shortlist: usize,
        k: usize,
    ) -> Result<Vec<SearchHit>> {
        if m_low > m_high {
            return Err(Error::InvalidConfig(format!("funnel dimensions {m_low}:{m_high} are not increasing")));
        }
        if shortlist < k {
            return Err(Error::InvalidConfig(format!("shortlist {shortlist} smaller than k {k}")));
        }
        let (q, qn) = self.query_prefix(query, m_high)?;
        let norms = self.prefix_norms(m_high)?;
        // Rows without a coarse score (zero prefix at m_low, or a zero query
        // prefix) rank after every scored row, in row order.
        let mut rows: Vec<usize> = match self.search_exact(query, m_low, shortlist) {
            Ok(coarse) => coarse.iter().map(|h| h.row).collect(),
            Err(Error::ZeroVector) => Vec::new(),
            Err(e) => return Err(e),
        };
        if rows.len() < shortlist {
            let low = self.prefix_norms(m_low)?;
            let unscored = (0..self.len()).filter(|&r| !self.degenerate[r] && !(low[r] > ZERO_NORM_EPS));
            let missing = shortlist - rows.len();
            if rows.is_empty() {
                rows.extend((0..self.len()).filter(|&r| !self.degenerate[r]).take(missing));
            } else {
                rows.extend(unscored.take(missing));
            }
        }
        rows.retain(|&r| self.usable(r, norms));
        let scored = self.score_rows(q, qn, m_high, &rows, norms);
        Ok(self.to_hits(scored, k))
    }

    pub fn memory_footprint(&self, m: usize) -> Result<Footprint> {
        self.dims.check(m)?;
        Ok(Footprint {
            dim: m,
            vector_bytes: self.len() as u64 * m as u64 * 4,
            doc_table_bytes: self.doc_table_bytes() as u64,
        })
    }

    pub fn doc_table_bytes(&self) -> usize {
        self.docs.iter().map(|d| 2 + d.id.len() + 4 + d.title.len()).sum()
    }

    pub fn vector_block_bytes(&self) -> usize {
        self.matrix.len() * 4
    }

    pub fn file_size(&self) -> usize {
        8 + 4 + 4 + 8 + 2 + 4 * self.dims.len() + self.len().div_ceil(8) + self.vector_block_bytes() + self.doc_table_bytes()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.file_size());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.full_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in self.dims.iter() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut bitmap = vec![0u8; self.len().div_ceil(8)];
        for (i, _) in self.degenerate.iter().enumerate().filter(|(_, d)| **d) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bitmap);
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for doc in &self.docs {
            let id_len = u16::try_from(doc.id.len())
                .map_err(|_| Error::Format(format!("document id of {} bytes is too long", doc.id.len())))?;
            let title_len = u32::try_from(doc.title.len())
                .map_err(|_| Error::Format("document title is too long".into()))?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(doc.id.as_bytes());
            out.extend_from_slice(&title_len.to_le_bytes());
            out.extend_from_slice(doc.title.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let full = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count too large".into()))?;
        let n_dims = r.u16()? as usize;
        let dims: Vec<usize> = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let dims = DimSet::new(dims).map_err(|e| Error::Format(e.to_string()))?;
        if dims.full() != full {
            return Err(Error::Format(format!("header dimension {full} != max of dims {}", dims.full())));
        }
        if count == 0 {
            return Err(Error::Format("index has no rows".into()));
        }
        let bitmap = r.take(count.div_ceil(8))?;
        let degenerate: Vec<bool> = (0..count).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
        let n_values = count
            .checked_mul(full)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("vector block size overflows".into()))?;
        let raw = r.take(n_values)?;
        let matrix: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value in row {}", i / full)));
        }
        let mut docs = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::Format("document id is not UTF-8".into()))?
                .to_owned();
            let title_len = r.u32()? as usize;
            let title = std::str::from_utf8(r.take(title_len)?)
                .map_err(|_| Error::Format("document title is not UTF-8".into()))?
                .to_owned();
            docs.push(Document { id, title });
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after doc table".into()));
        }
        check_unique(&docs).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self::from_parts(dims, matrix, docs, degenerate))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// FNV-1a over the serialized form.
    pub fn checksum(&self) -> Result<u64> {
        Ok(crate::encoder::fnv1a64(&self.to_bytes()?))
    }
}

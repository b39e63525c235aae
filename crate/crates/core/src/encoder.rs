//! Hashed character n-gram text encoder.
//!
//! Text is lowercased and split on non-alphanumeric characters. Each token
//! contributes the whole token (wrapped as `<token>`) plus every character
//! 3-, 4- and 5-gram of the bare token. Features are hashed with 64-bit
//! FNV-1a into `B` buckets. An embedding is the count-weighted mean of the
//! touched rows of a `B x H` feature table, multiplied by an `H x D`
//! projection.
//!
//! Parameters live in one flat vector: the feature table (row-major) followed
//! by the projection (row-major).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nested::{DimSet, NestedEmbedding};

pub const MODEL_MAGIC: &[u8; 8] = b"NEAR2MDL";
pub const MODEL_VERSION: u32 = 1;

pub const DEFAULT_BUCKETS: usize = 1 << 15;
pub const DEFAULT_FEATURE_DIM: usize = 128;
pub const DEFAULT_DIMS: [usize; 5] = [768, 512, 256, 128, 64];

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// xorshift64* generator, seeded through one splitmix64 round so that
/// seed 0 is usable. Drives parameter initialization.
#[derive(Clone, Debug)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        XorShift64Star {
            state: if z == 0 { 0x2545_f491_4f6c_dd1d } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Sparse bucket counts, sorted by bucket id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureBag {
    entries: Vec<(u32, u32)>,
}

impl FeatureBag {
    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, c)| u64::from(*c)).sum()
    }
}

/// Raw feature strings of `text`, before hashing.
pub fn features(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        out.push(format!("<{token}>"));
        let chars: Vec<char> = token.chars().collect();
        for n in 3..=5 {
            for w in chars.windows(n) {
                out.push(w.iter().collect());
            }
        }
    }
    out
}

pub fn tokenize(text: &str, buckets: usize) -> FeatureBag {
    assert!(buckets > 0 && buckets <= u32::MAX as usize + 1);
    let mut ids: Vec<u32> = features(text)
        .iter()
        .map(|f| (fnv1a64(f.as_bytes()) % buckets as u64) as u32)
        .collect();
    ids.sort_unstable();
    let mut entries: Vec<(u32, u32)> = Vec::new();
    for id in ids {
        match entries.last_mut() {
            Some((last, count)) if *last == id => *count += 1,
            _ => entries.push((id, 1)),
        }
    }
    FeatureBag { entries }
}

/// Shape and seed of a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub buckets: usize,
    pub feature_dim: usize,
    pub dims: DimSet,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            buckets: DEFAULT_BUCKETS,
            feature_dim: DEFAULT_FEATURE_DIM,
            dims: DimSet::new(DEFAULT_DIMS.to_vec()).expect("valid defaults"),
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    buckets: usize,
    feature_dim: usize,
    dims: DimSet,
    seed: u64,
    params: Vec<f64>,
}

/// Forward-pass intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub bags: Vec<FeatureBag>,
    pub pooled: Vec<Vec<f64>>,
    pub embeddings: Vec<NestedEmbedding>,
}

/// Dense gradient over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub values: Vec<f64>,
    /// Buckets whose table row received a contribution, ascending.
    pub touched_buckets: Vec<u32>,
}

impl EncoderModel {
    /// Fresh model with parameters drawn uniformly from
    /// `(-1/sqrt(H), 1/sqrt(H))`, table first then projection.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.buckets == 0 || config.buckets > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!("bucket count {} out of range", config.buckets)));
        }
        if config.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be >= 1".into()));
        }
        let n = config.buckets * config.feature_dim + config.feature_dim * config.dims.full();
        let scale = 1.0 / (config.feature_dim as f64).sqrt();
        let mut rng = XorShift64Star::new(config.seed);
        let params = (0..n).map(|_| (2.0 * rng.next_f64() - 1.0) * scale).collect();
        Ok(EncoderModel {
            buckets: config.buckets,
            feature_dim: config.feature_dim,
            dims: config.dims.clone(),
            seed: config.seed,
            params,
        })
    }

    pub fn from_params(
        buckets: usize,
        feature_dim: usize,
        dims: DimSet,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = buckets * feature_dim + feature_dim * dims.full();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters given, {expected} expected",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(EncoderModel {
            buckets,
            feature_dim,
            dims,
            seed,
            params,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn dims(&self) -> &DimSet {
        &self.dims
    }

    pub fn full_dim(&self) -> usize {
        self.dims.full()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn table_len(&self) -> usize {
        self.buckets * self.feature_dim
    }

    pub fn table_row(&self, bucket: usize) -> &[f64] {
        let h = self.feature_dim;
        &self.params[bucket * h..(bucket + 1) * h]
    }

    pub fn table_row_mut(&mut self, bucket: usize) -> &mut [f64] {
        let h = self.feature_dim;
        &mut self.params[bucket * h..(bucket + 1) * h]
    }

    /// `H x D` row-major projection.
    pub fn projection(&self) -> &[f64] {
        &self.params[self.table_len()..]
    }

    pub fn featurize(&self, text: &str) -> FeatureBag {
        tokenize(text, self.buckets)
    }

    /// Count-weighted mean of the bag's table rows.
    fn pool(&self, bag: &FeatureBag) -> Vec<f64> {
        let mut pooled = vec![0.0; self.feature_dim];
        for &(bucket, count) in bag.entries() {
            let c = f64::from(count);
            for (p, v) in pooled.iter_mut().zip(self.table_row(bucket as usize)) {
                *p += c * v;
            }
        }
        let total = bag.total() as f64;
        for p in &mut pooled {
            *p /= total;
        }
        pooled
    }

    fn project(&self, pooled: &[f64]) -> Vec<f64> {
        let d = self.full_dim();
        let proj = self.projection();
        let mut out = vec![0.0; d];
        for (h, &p) in pooled.iter().enumerate() {
            let row = &proj[h * d..(h + 1) * d];
            for (o, w) in out.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        out
    }

    fn forward(&self, text: &str) -> Result<(FeatureBag, Vec<f64>, NestedEmbedding)> {
        let bag = self.featurize(text);
        if bag.is_empty() {
            let emb = NestedEmbedding::degenerate(self.dims.clone());
            return Ok((bag, vec![0.0; self.feature_dim], emb));
        }
        let pooled = self.pool(&bag);
        let values = self.project(&pooled);
        // Finite but very large parameters can still overflow.
        let emb = NestedEmbedding::new(values, self.dims.clone()).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("encoding {text:?}: {m}")),
            other => other,
        })?;
        Ok((bag, pooled, emb))
    }

    /// Errors only when the parameters overflow to a non-finite embedding.
    pub fn encode(&self, text: &str) -> Result<NestedEmbedding> {
        Ok(self.forward(text)?.2)
    }

    /// Encodes in parallel; element `i` is exactly `encode(texts[i])`.
    pub fn encode_batch<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<NestedEmbedding>> {
        texts.par_iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn encode_for_backward<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<EncodedBatch> {
        let parts: Vec<_> = texts
            .par_iter()
            .map(|t| self.forward(t.as_ref()))
            .collect::<Result<_>>()?;
        let mut batch = EncodedBatch {
            bags: Vec::with_capacity(parts.len()),
            pooled: Vec::with_capacity(parts.len()),
            embeddings: Vec::with_capacity(parts.len()),
        };
        for (bag, pooled, emb) in parts {
            batch.bags.push(bag);
            batch.pooled.push(pooled);
            batch.embeddings.push(emb);
        }
        Ok(batch)
    }

    /// Parameter gradients given upstream gradients for each embedding of a
    /// forward pass. Texts are accumulated in order.
    pub fn backward_encoded(&self, batch: &EncodedBatch, upstream: &[Vec<f64>]) -> Result<ParamGradients> {
        if upstream.len() != batch.embeddings.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for {} texts",
                upstream.len(),
                batch.embeddings.len()
            )));
        }
        let d = self.full_dim();
        let h_dim = self.feature_dim;
        let table_len = self.table_len();
        let mut grads = vec![0.0; self.params.len()];
        let mut touched: Vec<u32> = Vec::new();
        let proj = self.projection();
        for ((bag, pooled), g) in batch.bags.iter().zip(&batch.pooled).zip(upstream) {
            if g.len() != d {
                return Err(Error::Shape(format!("upstream gradient of length {}, expected {d}", g.len())));
            }
            if bag.is_empty() {
                continue;
            }
            let mut d_pooled = vec![0.0; h_dim];
            {
                let g_proj = &mut grads[table_len..];
                for h in 0..h_dim {
                    let row = &proj[h * d..(h + 1) * d];
                    let p = pooled[h];
                    let g_row = &mut g_proj[h * d..(h + 1) * d];
                    let mut acc = 0.0;
                    for ((gr, w), u) in g_row.iter_mut().zip(row).zip(g) {
                        *gr += p * u;
                        acc += w * u;
                    }
                    d_pooled[h] = acc;
                }
            }
            let total = bag.total() as f64;
            for &(bucket, count) in bag.entries() {
                let w = f64::from(count) / total;
                let b = bucket as usize;
                for (gt, dp) in grads[b * h_dim..(b + 1) * h_dim].iter_mut().zip(&d_pooled) {
                    *gt += w * dp;
                }
                touched.push(bucket);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        Ok(ParamGradients {
            values: grads,
            touched_buckets: touched,
        })
    }

    pub fn backward<S: AsRef<str> + Sync>(&self, texts: &[S], upstream: &[Vec<f64>]) -> Result<ParamGradients> {
        let batch = self.encode_for_backward(texts)?;
        self.backward_encoded(&batch, upstream)
    }

    /// Size in bytes of the serialized model.
    pub fn file_size(&self) -> usize {
        header_len(self.dims.len()) + 4 * self.params.len()
    }

    /// Serializes to the `NEAR2MDL` layout. Parameters are stored as
    /// little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.buckets as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.full_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in self.dims.iter() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let buckets = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let full = r.u32()? as usize;
        let n_dims = r.u16()? as usize;
        let dims: Vec<usize> = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let dims = DimSet::new(dims).map_err(|e| Error::Format(e.to_string()))?;
        if dims.full() != full {
            return Err(Error::Format(format!("header dimension {full} != max of dims {}", dims.full())));
        }
        let seed = r.u64()?;
        let count = buckets
            .checked_mul(feature_dim)
            .and_then(|t| feature_dim.checked_mul(full).and_then(|p| t.checked_add(p)))
            .ok_or_else(|| Error::Format("parameter count overflows".into()))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        let params: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        EncoderModel::from_params(buckets, feature_dim, dims, seed, params)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Same model with every parameter rounded through f32, as a save/load
    /// round trip would produce.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.params {
            *p = f64::from(*p as f32);
        }
        m
    }
}

/// Header bytes before the parameter block for `n_dims` nested dimensions.
pub fn header_len(n_dims: usize) -> usize {
    8 + 4 + 4 + 4 + 4 + 2 + 4 * n_dims + 8
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

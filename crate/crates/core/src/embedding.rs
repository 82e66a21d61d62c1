//! Text embeddings, cosine similarity and exact nearest-neighbour search.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::{HttpRequest, Transport, TransportError};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("zero-length vector cannot be normalized")]
    ZeroVector,
    #[error("nearest-neighbour index is empty")]
    EmptyIndex,
    #[error("vector cache: {0}")]
    Cache(String),
}

/// A unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    /// Stable identifier, used to key cached vectors.
    fn provider_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
    /// Persists any cached state.
    fn flush(&self) -> Result<(), EmbeddingError> {
        Ok(())
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).embed(text)
    }
    fn flush(&self) -> Result<(), EmbeddingError> {
        (**self).flush()
    }
}

pub const TEST_EMBEDDER_DIM: usize = 256;
pub const TEST_EMBEDDER_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;
const BUCKET_MIX: u64 = 0xD6E8_FEB8_6659_FD93;

/// Deterministic character-trigram embedder used for fixtures and tests.
///
/// The text is lowercased, trimmed, internal whitespace runs are collapsed to
/// one space and a single space is added on each side. Every window of three
/// `char`s is hashed over its UTF-8 bytes with FNV-1a seeded by
/// [`TEST_EMBEDDER_SEED`]; the hash is multiplied by a mixing constant and
/// bits 32.. select one of `dim` buckets. Bucket counts are L2-normalized.
#[derive(Debug, Clone)]
pub struct TestEmbedder {
    dim: usize,
    id: String,
}

impl TestEmbedder {
    pub fn new() -> Self {
        Self::with_dimension(TEST_EMBEDDER_DIM)
    }

    pub fn with_dimension(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim, id: format!("test-trigram-{dim}") }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    fn bucket(&self, gram: &str) -> usize {
        let mut h = TEST_EMBEDDER_SEED;
        for b in gram.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        ((h.wrapping_mul(BUCKET_MIX) >> 32) % self.dim as u64) as usize
    }
}

impl Default for TestEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl Embedder for TestEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let folded = text.to_lowercase();
        let words: Vec<&str> = folded.split_whitespace().collect();
        if words.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        let mut counts = vec![0.0; self.dim];
        let mut gram = String::with_capacity(12);
        for window in padded.windows(3) {
            gram.clear();
            gram.extend(window);
            counts[self.bucket(&gram)] += 1.0;
        }
        EmbeddingVector::normalized(counts)
    }
}

/// Embeddings from an HTTP endpoint speaking the common `{model, input}` →
/// `{data: [{embedding}]}` protocol.
pub struct RemoteEmbedder {
    transport: Arc<dyn Transport>,
    url: String,
    api_key: Option<String>,
    model: String,
    id: String,
}

impl RemoteEmbedder {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        Self { transport, url: url.into(), api_key, id: format!("remote:{model}"), model }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut headers = Vec::new();
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let request = HttpRequest {
            url: self.url.clone(),
            headers,
            body: json!({"model": self.model, "input": text}),
        };
        let response = self
            .transport
            .post_json(&request)
            .map_err(|e: TransportError| EmbeddingError::ProviderUnavailable(e.to_string()))?;
        if response.status != 200 {
            return Err(EmbeddingError::ProviderUnavailable(format!("HTTP {}", response.status)));
        }
        let parsed: EmbeddingResponse = serde_json::from_str(&response.body)
            .map_err(|e| EmbeddingError::ProviderUnavailable(format!("bad response: {e}")))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbeddingError::ProviderUnavailable("empty data".into()))?
            .embedding;
        EmbeddingVector::normalized(values)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    sha256: String,
    provider: String,
    vector: EmbeddingVector,
}

/// Memoizes another embedder, optionally persisting vectors to a
/// newline-delimited JSON file of `{sha256, provider, vector}` records.
pub struct CachedEmbedder<E> {
    inner: E,
    path: Option<PathBuf>,
    vectors: Mutex<HashMap<String, EmbeddingVector>>,
}

fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn in_memory(inner: E) -> Self {
        Self { inner, path: None, vectors: Mutex::new(HashMap::new()) }
    }

    /// Loads the cache file if it exists. Records from other providers are ignored.
    pub fn with_file(inner: E, path: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let path = path.into();
        let mut vectors = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(&path).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| EmbeddingError::Cache(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
                if rec.provider == inner.provider_id() {
                    vectors.insert(rec.sha256, rec.vector);
                }
            }
        }
        Ok(Self { inner, path: Some(path), vectors: Mutex::new(vectors) })
    }

    pub fn len(&self) -> usize {
        self.vectors.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrites the cache file, records sorted by hash.
    pub fn save(&self) -> Result<(), EmbeddingError> {
        let Some(path) = &self.path else { return Ok(()) };
        let vectors = self.vectors.lock().unwrap();
        let mut keys: Vec<&String> = vectors.keys().collect();
        keys.sort();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EmbeddingError::Cache(e.to_string()))?);
        for key in keys {
            let rec = CacheRecord { sha256: key.clone(), provider: self.inner.provider_id().to_string(), vector: vectors[key].clone() };
            let line = serde_json::to_string(&rec).expect("cache record serializes");
            writeln!(out, "{line}").map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        }
        out.flush().map_err(|e| EmbeddingError::Cache(e.to_string()))
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let key = text_key(text);
        if let Some(v) = self.vectors.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.vectors.lock().unwrap().insert(key, v.clone());
        Ok(v)
    }

    fn flush(&self) -> Result<(), EmbeddingError> {
        self.save()
    }
}

/// Exact-scan nearest-neighbour index over string ids.
#[derive(Debug, Clone)]
pub struct NearestNeighborIndex {
    items: Vec<(String, EmbeddingVector)>,
}

impl NearestNeighborIndex {
    pub fn new(items: Vec<(String, EmbeddingVector)>) -> Result<Self, EmbeddingError> {
        if let Some((_, first)) = items.first() {
            let dim = first.dimension();
            if let Some((_, bad)) = items.iter().find(|(_, v)| v.dimension() != dim) {
                return Err(EmbeddingError::DimensionMismatch(dim, bad.dimension()));
            }
        }
        Ok(Self { items })
    }

    /// Embeds every `(id, text)` pair.
    pub fn build<'a, I>(embedder: &dyn Embedder, texts: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let items = texts
            .into_iter()
            .map(|(id, text)| Ok((id.to_string(), embedder.embed(text)?)))
            .collect::<Result<Vec<_>, EmbeddingError>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Top `k` items by similarity, descending; ties by ascending id.
    pub fn query(&self, v: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>, EmbeddingError> {
        if self.items.is_empty() {
            return Err(EmbeddingError::EmptyIndex);
        }
        let mut scored = self
            .items
            .iter()
            .map(|(id, item)| Ok((id.as_str(), cosine(v, item)?)))
            .collect::<Result<Vec<_>, EmbeddingError>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored.truncate(k.max(1));
        Ok(scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }
}

/// Loads `path` for the vector cache, or returns an in-memory cache.
pub fn cached(inner: Box<dyn Embedder>, path: Option<&Path>) -> Result<CachedEmbedder<Box<dyn Embedder>>, EmbeddingError> {
    match path {
        Some(p) => CachedEmbedder::with_file(inner, p),
        None => Ok(CachedEmbedder::in_memory(inner)),
    }
}

impl Embedder for Box<dyn Embedder> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).embed(text)
    }
    fn flush(&self) -> Result<(), EmbeddingError> {
        (**self).flush()
    }
}
